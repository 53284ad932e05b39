"""SO(3) helpers: skew matrices, axis-angle exponential/log and the left Jacobian.

All functions accept a single 3-vector or a batch of shape (..., 3).
"""

import numpy as np

_SMALL = 1e-4


def skew(v):
    v = np.asarray(v, dtype=float)
    out = np.zeros(v.shape[:-1] + (3, 3))
    out[..., 0, 1] = -v[..., 2]
    out[..., 0, 2] = v[..., 1]
    out[..., 1, 0] = v[..., 2]
    out[..., 1, 2] = -v[..., 0]
    out[..., 2, 0] = -v[..., 1]
    out[..., 2, 1] = v[..., 0]
    return out


def _coefficients(theta):
    """a = sin(x)/x, b = (1-cos(x))/x^2, c = (x-sin(x))/x^3 with Taylor fallbacks."""
    small = theta < _SMALL
    t = np.where(small, 1.0, theta)
    t2 = theta * theta
    a = np.where(small, 1.0 - t2 / 6.0 + t2 * t2 / 120.0, np.sin(t) / t)
    b = np.where(small, 0.5 - t2 / 24.0 + t2 * t2 / 720.0, (1.0 - np.cos(t)) / (t * t))
    c = np.where(small, 1.0 / 6.0 - t2 / 120.0 + t2 * t2 / 5040.0, (t - np.sin(t)) / (t * t * t))
    return a, b, c


def rotvec_to_matrix(rotvec):
    """Rodrigues' formula."""
    rotvec = np.asarray(rotvec, dtype=float)
    theta = np.linalg.norm(rotvec, axis=-1)
    a, b, _ = _coefficients(theta)
    K = skew(rotvec)
    eye = np.broadcast_to(np.eye(3), K.shape)
    return eye + a[..., None, None] * K + b[..., None, None] * (K @ K)


def left_jacobian(rotvec):
    """Left Jacobian J_l of SO(3): Exp(w + d) ~= Exp(J_l(w) d) Exp(w)."""
    rotvec = np.asarray(rotvec, dtype=float)
    theta = np.linalg.norm(rotvec, axis=-1)
    _, b, c = _coefficients(theta)
    K = skew(rotvec)
    eye = np.broadcast_to(np.eye(3), K.shape)
    return eye + b[..., None, None] * K + c[..., None, None] * (K @ K)


def matrix_to_rotvec(R):
    """Logarithm map, robust near 0 and pi."""
    R = np.asarray(R, dtype=float)
    if R.ndim > 2:
        return np.stack([matrix_to_rotvec(r) for r in R.reshape(-1, 3, 3)]).reshape(R.shape[:-2] + (3,))
    w = np.array([R[2, 1] - R[1, 2], R[0, 2] - R[2, 0], R[1, 0] - R[0, 1]])
    theta = np.arctan2(0.5 * np.linalg.norm(w), (np.trace(R) - 1.0) / 2.0)
    if theta < 1e-6:
        return 0.5 * w
    if np.pi - theta < 1e-4:
        # axis from the symmetric part; sign from the antisymmetric part
        B = (R + np.eye(3)) / 2.0
        k = int(np.argmax(np.diag(B)))
        axis = B[:, k] / np.sqrt(max(B[k, k], 1e-300))
        axis /= np.linalg.norm(axis)
        if axis @ w < 0:
            axis = -axis
        return axis * theta
    return w * (theta / (2.0 * np.sin(theta)))


def angle_between(Ra, Rb):
    """Geodesic angle in radians between two rotation matrices (atan2 form, accurate near 0)."""
    D = Ra.T @ Rb
    cos = (np.trace(D) - 1.0) / 2.0
    sin = 0.5 * np.linalg.norm([D[2, 1] - D[1, 2], D[0, 2] - D[2, 0], D[1, 0] - D[0, 1]])
    return float(np.arctan2(sin, cos))


def random_rotation(rng):
    """Uniformly distributed rotation (via a random unit quaternion)."""
    q = rng.normal(size=4)
    q /= np.linalg.norm(q)
    w, x, y, z = q
    return np.array([
        [1 - 2 * (y * y + z * z), 2 * (x * y - z * w), 2 * (x * z + y * w)],
        [2 * (x * y + z * w), 1 - 2 * (x * x + z * z), 2 * (y * z - x * w)],
        [2 * (x * z - y * w), 2 * (y * z + x * w), 1 - 2 * (x * x + y * y)],
    ])
