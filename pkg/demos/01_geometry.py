"""Geometry core: rigid transforms, pinhole cameras, triangulation and similarity alignment."""

import numpy as np

from hoannot.geometry import (CameraModel, RigidTransform, apply_similarity, blob, box, build_index, rigid_align,
                              triangulate_pair, voxel_intersection_volume)

rng = np.random.default_rng(0)

# %% Rigid transforms compose like matrices and invert exactly
A = RigidTransform.from_rotvec([0.1, -0.2, 0.3], [0.01, 0.02, 0.5])
B = RigidTransform.from_rotvec([0.0, 0.4, 0.0], [-0.1, 0.0, 0.0])
p = rng.normal(size=(5, 3))
print("compose error:", np.abs((A @ B).apply(p) - A.apply(B.apply(p))).max())
print("inverse error:", np.abs(A.inverse().apply(A.apply(p)) - p).max())

# %% Two cameras half a meter apart looking at a point 1 m away
look = RigidTransform.from_rotvec([0.0, 0.0, 0.0], [0.0, 0.0, 1.0])  # world -> camera: points at z = 0 sit 1 m ahead
left = CameraModel(1000.0, 1000.0, 640.0, 512.0, RigidTransform.from_rotvec([0, 0, 0], [0.25, 0, 0]) @ look, name="left")
right = CameraModel(1000.0, 1000.0, 640.0, 512.0, RigidTransform.from_rotvec([0, 0, 0], [-0.25, 0, 0]) @ look, name="right")
X = np.array([0.02, -0.03, 0.05])
x_l, x_r = left.project(X), right.project(X)
print("pixels:", x_l.round(2), x_r.round(2))
print("triangulated:", triangulate_pair(left, right, x_l, x_r).round(9))

# %% With 1 px noise the depth error grows with distance squared over baseline
noisy = [triangulate_pair(left, right, x_l + rng.normal(size=2), x_r + rng.normal(size=2)) for _ in range(500)]
print("mean 3D error at 1 m, 1 px noise (mm):", 1000 * np.linalg.norm(np.array(noisy) - X, axis=1).mean())

# %% Kabsch/Umeyama recovers a similarity from correspondences
src = rng.normal(size=(21, 3))
T_true = RigidTransform.from_rotvec(rng.normal(size=3), rng.normal(size=3))
dst = 1.3 * T_true.apply(src)
T, s = rigid_align(src, dst, with_scale=True)
print("scale:", s, "residual:", np.abs(apply_similarity(T, s, src) - dst).max())

# %% Meshes: nearest-vertex queries and voxelized overlap volume
mesh = blob(0.05, 4, seed=3)
ids, dist = build_index(mesh).query(rng.normal(size=(3, 3)) * 0.05)
print("nearest vertex ids:", ids, "distances (mm):", (dist * 1000).round(2))
a, b = box((0.04, 0.04, 0.04)), box((0.04, 0.04, 0.04), center=(0.02, 0.0, 0.0))
print("cube overlap (cm^3, exact 32):", voxel_intersection_volume(a, b, 0.001))
