"""Evaluation metrics: joint and pose errors, smoothness, contact, collision and feature distance."""

import numpy as np

from hoannot.geometry import RigidTransform, icosphere, random_rotation
from hoannot.metrics import (acceleration_error, collision_ratio, contact_ratio, frechet_distance, interaction_field,
                             mpjpe, pa_mpjpe, penetration_volume, rotation_error, translation_error)

rng = np.random.default_rng(7)

# %% MPJPE and its Procrustes-aligned variant
gt = rng.normal(size=(10, 21, 3)) * 0.05
R = random_rotation(rng)
pred = 1.1 * gt @ R.T + 0.02 + rng.normal(size=gt.shape) * 0.002
print(f"MPJPE {mpjpe(pred, gt):.1f} mm, PA-MPJPE {pa_mpjpe(pred, gt):.2f} mm")

# %% Object pose errors and acceleration error on a trajectory
poses = [RigidTransform.from_rotvec([0, 0, 0.01 * k], [0.001 * k, 0, 0]) for k in range(30)]
noisy = [RigidTransform.from_rotvec(p.rotvec() + rng.normal(size=3) * 0.002, p.translation + rng.normal(size=3) * 5e-4)
         for p in poses]
print(f"T_e {translation_error(noisy, poses):.2f} mm, R_e {rotation_error(noisy, poses):.3f} deg")
traj = np.cumsum(rng.normal(size=(30, 21, 3)) * 1e-3, axis=0)
print(f"acceleration error {acceleration_error(traj + rng.normal(size=traj.shape) * 1e-3, traj):.2f} m/s^2")

# %% Contact and collision from nearest-vertex distances and voxelized meshes
ball = icosphere(0.03, 4)
n = ball.vertices[0] / np.linalg.norm(ball.vertices[0])  # icospheres are point-symmetric, so -n is a vertex too
near = ball.translated(n * 0.061)  # closest vertices 1 mm apart
deep = ball.translated(n * 0.05)  # 1 cm overlap, exact lens volume pi (4r + d)(2r - d)^2 / 12 = 4.45 cm^3
for name, other in (("1 mm gap", near), ("1 cm overlap", deep)):
    print(f"{name}: closest vertex {1000 * interaction_field(ball, other).min():.1f} mm, "
          f"penetration {penetration_volume(ball, other):.2f} cm^3, "
          f"contact {contact_ratio([(ball, other)]):.0f}%, collision {collision_ratio([(ball, [other])]):.0f}%")

# %% Frechet distance between Gaussian fits of two feature sets whose means differ by 1
a = rng.normal(size=(20000, 64))
b = rng.normal(size=(20000, 64)) + np.eye(64)[0]
print(f"Frechet distance {frechet_distance(a, b):.3f} (about 1 plus finite-sample bias)")
