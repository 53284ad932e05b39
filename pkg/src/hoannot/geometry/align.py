import numpy as np

from ..errors import RankDeficient, ShapeMismatch
from .transform import RigidTransform


def rigid_align(source, target, with_scale=False):
    """Least-squares similarity/rigid fit (Umeyama).

    Finds s, R, t minimizing sum ||s R source_i + t - target_i||^2.
    Returns (RigidTransform, scale); scale is 1.0 when with_scale is False.
    The transform part maps s*source into target, i.e. target ~ s R x + t.
    """
    src = np.asarray(source, dtype=float)
    dst = np.asarray(target, dtype=float)
    if src.shape != dst.shape or src.ndim != 2 or src.shape[1] != 3:
        raise ShapeMismatch(f"expected matching (N, 3) arrays, got {src.shape} and {dst.shape}")
    if src.shape[0] < 3:
        raise RankDeficient("need at least 3 correspondences")
    mu_s = src.mean(axis=0)
    mu_d = dst.mean(axis=0)
    xs = src - mu_s
    xd = dst - mu_d
    sv = np.linalg.svd(xs, compute_uv=False)
    if sv[1] <= 1e-9 * max(sv[0], 1e-300):
        raise RankDeficient("source points are collinear")
    H = xs.T @ xd
    U, S, Vt = np.linalg.svd(H)
    d = np.sign(np.linalg.det(Vt.T @ U.T))
    if d == 0:
        d = 1.0
    D = np.diag([1.0, 1.0, d])
    R = Vt.T @ D @ U.T
    # re-orthonormalize to keep the SO(3) invariant tight
    u, _, vt = np.linalg.svd(R)
    R = u @ vt
    scale = 1.0
    if with_scale:
        scale = float(np.sum(S * np.diag(D)) / np.sum(xs * xs))
    t = mu_d - scale * R @ mu_s
    return RigidTransform(R, t), scale


def apply_similarity(transform, scale, points):
    return scale * np.asarray(points) @ transform.rotation.T + transform.translation
