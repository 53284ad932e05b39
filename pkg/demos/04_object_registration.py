"""Registering a marker rig to an object mesh, then tracking the object from mocap markers."""

import numpy as np

from hoannot.geometry import RigidTransform, blob, random_rotation
from hoannot.geometry.rotations import angle_between
from hoannot.registration import MarkerRig, frame_object_pose, register_rig

rng = np.random.default_rng(3)

# %% Markers glued to the surface of a scanned object, measured in the mocap rig frame
mesh = blob(0.05, 6, seed=3, amplitude=0.25)
vids = rng.choice(len(mesh.vertices), 14, replace=False)
T_true = RigidTransform(random_rotation(rng), rng.normal(size=3) * 0.1)  # rig -> model
rig = MarkerRig(T_true.inverse().apply(mesh.vertices[vids]))

# %% A hand-placed initial guess that is 5 mm and 5 degrees off
axis, shift = rng.normal(size=3), rng.normal(size=3)
D = RigidTransform.from_rotvec(axis / np.linalg.norm(axis) * np.deg2rad(5.0), shift / np.linalg.norm(shift) * 0.005)
T_init = D @ T_true

# Adam on the contact-plus-penetration energy of markers within 1 cm of the surface (about 13 s)
res = register_rig(rig, mesh, T_init, alpha=0.01, lr=1e-4)
centroid = rig.marker_local.mean(axis=0)
print(f"iterations {res.iterations}, mean contact {1000 * res.contact.mean():.3f} mm")
print(f"pose error: {1000 * np.linalg.norm(res.T_star.apply(centroid) - T_true.apply(centroid)):.3f} mm, "
      f"{np.degrees(angle_between(res.T_star.rotation, T_true.rotation)):.3f} deg")

# %% Per-frame tracking: Kabsch of the tracked markers against their registered positions
P = RigidTransform(random_rotation(rng), [0.1, 0.2, 0.8])  # object -> world at some frame
world = P.apply(res.T_star.apply(rig.marker_local[list(rig.tracked)]))
world += rng.normal(size=world.shape) * 0.0005
pose, rms = frame_object_pose(rig, res.T_star, world)
print(f"tracked pose error {1000 * np.linalg.norm(pose.translation - P.translation):.3f} mm, rms {1000 * rms:.3f} mm")
