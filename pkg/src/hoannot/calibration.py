"""Camera extrinsics from 3D-2D marker correspondences, and timestamp stream matching."""

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import DegenerateConfiguration, InsufficientObservations, InvariantViolation, SchemaError
from .geometry.rotations import random_rotation, rotvec_to_matrix, skew
from .geometry.transform import RigidTransform

DEFAULT_MAX_GAP_MS = 17.0
COPLANAR_TOL = 1e-3  # meters


@dataclass(frozen=True)
class CalibrationObservation:
    marker_world: tuple  # meters
    pixel: tuple


@dataclass(frozen=True)
class TimestampStream:
    sensor_id: str
    timestamps: np.ndarray  # UTC milliseconds

    def __post_init__(self):
        ts = np.asarray(self.timestamps, dtype=float).reshape(-1)
        if len(ts) > 1 and np.any(np.diff(ts) <= 0):
            raise InvariantViolation(f"stream {self.sensor_id!r}: timestamps must be strictly increasing")
        object.__setattr__(self, "timestamps", ts)


@dataclass(frozen=True)
class StreamMatch:
    ref_index: int
    other_index: int
    dt: float  # other - reference, ms


# ---------------------------------------------------------------- PnP

def _residuals(R, t, X, xn):
    pc = X @ R.T + t
    return (pc[:, :2] / pc[:, 2:3] - xn).reshape(-1), pc


def _refine(R, t, X, xn, iterations=100):
    """Levenberg-Marquardt on normalized-coordinate reprojection error, rotation as a left increment."""
    lam = 1e-3
    r, pc = _residuals(R, t, X, xn)
    cost = r @ r
    for _ in range(iterations):
        z = pc[:, 2]
        if np.any(z <= 0):
            break
        dproj = np.zeros((len(X), 2, 3))
        dproj[:, 0, 0] = 1 / z
        dproj[:, 0, 2] = -pc[:, 0] / z ** 2
        dproj[:, 1, 1] = 1 / z
        dproj[:, 1, 2] = -pc[:, 1] / z ** 2
        # d(pc)/d(omega) = -[R X]_x, d(pc)/dt = I
        Jw = -dproj @ skew(X @ R.T)
        J = np.concatenate([Jw, dproj], axis=2).reshape(-1, 6)
        g = J.T @ r
        H = J.T @ J
        improved = False
        for _ in range(20):
            step = -np.linalg.solve(H + lam * np.diag(np.diag(H) + 1e-12), g)
            R_new = rotvec_to_matrix(step[:3]) @ R
            t_new = t + step[3:]
            r_new, pc_new = _residuals(R_new, t_new, X, xn)
            cost_new = r_new @ r_new
            if np.all(pc_new[:, 2] > 0) and cost_new <= cost:
                improved = True
                break
            lam *= 10
        if not improved:
            break
        dcost = cost - cost_new
        R, t, r, pc, cost = R_new, t_new, r_new, pc_new, cost_new
        lam = max(lam / 10, 1e-12)
        if np.linalg.norm(step) < 1e-14 or dcost <= 1e-16 * max(cost, 1e-300):
            break
    u, _, vt = np.linalg.svd(R)
    return u @ vt, t, cost


def _dlt(X, xn):
    """Linear [R|t] from >= 6 non-coplanar points in normalized coordinates."""
    mu = X.mean(axis=0)
    s = np.sqrt(3) / np.mean(np.linalg.norm(X - mu, axis=1))
    T = np.eye(4)
    T[:3, :3] *= s
    T[:3, 3] = -s * mu
    Xh = np.c_[(X - mu) * s, np.ones(len(X))]
    A = np.zeros((2 * len(X), 12))
    A[0::2, 0:4] = Xh
    A[0::2, 8:12] = -xn[:, :1] * Xh
    A[1::2, 4:8] = Xh
    A[1::2, 8:12] = -xn[:, 1:2] * Xh
    P = np.linalg.svd(A)[2][-1].reshape(3, 4) @ T
    M = P[:, :3]
    if np.linalg.det(M) < 0:
        P = -P
        M = -M
    u, sv, vt = np.linalg.svd(M)
    return u @ vt, P[:, 3] / sv.mean()


def _planar_init(X, xn, basis, origin):
    """Homography-based [R|t] for coplanar points (plane coords via `basis`)."""
    uv = (X - origin) @ basis[:, :2]
    A = []
    for (u, v), (x, y) in zip(uv, xn):
        A.append([u, v, 1, 0, 0, 0, -x * u, -x * v, -x])
        A.append([0, 0, 0, u, v, 1, -y * u, -y * v, -y])
    H = np.linalg.svd(np.asarray(A))[2][-1].reshape(3, 3)
    H /= np.linalg.norm(H[:, 0])
    if H[2, 2] < 0:  # plane origin must be in front of the camera
        H = -H
    r1, r2 = H[:, 0], H[:, 1]
    Rp = np.c_[r1, r2, np.cross(r1, r2)]
    u, _, vt = np.linalg.svd(Rp)
    Rp = u @ vt
    R = Rp @ basis.T
    t = H[:, 2] - R @ origin
    return R, t


def _multistart(X, xn):
    """Initial guesses for 4-5 point problems: cameras looking at the centroid from many directions."""
    rng = np.random.default_rng(0)
    mu = X.mean(axis=0)
    spread = np.max(np.linalg.norm(X - mu, axis=1))
    for _ in range(64):
        R = random_rotation(rng)
        # place the centroid on the optical axis at a depth matching the observed image spread
        img_spread = np.max(np.linalg.norm(xn - xn.mean(axis=0), axis=1))
        depth = spread / max(img_spread, 1e-6)
        t = np.array([xn.mean(axis=0)[0] * depth, xn.mean(axis=0)[1] * depth, depth]) - R @ mu
        yield R, t


def solve_extrinsic(intrinsic, observations):
    """Recover the world->camera transform from marker observations.

    The extrinsic of `intrinsic` is ignored. Returns (RigidTransform, mean reprojection error in px).
    """
    if len(observations) < 4:
        raise InsufficientObservations(f"need >= 4 observations, got {len(observations)}")
    X = np.array([o.marker_world for o in observations], dtype=float)
    px = np.array([o.pixel for o in observations], dtype=float)
    xn = intrinsic.normalized(px)

    mu = X.mean(axis=0)
    _, sv, vt = np.linalg.svd(X - mu)
    spread = sv / np.sqrt(len(X))
    coplanar = np.max(np.abs((X - mu) @ vt[2])) < COPLANAR_TOL
    if coplanar and len(X) < 6:
        raise DegenerateConfiguration("markers are coplanar and fewer than 6")
    if spread[1] < COPLANAR_TOL:
        raise DegenerateConfiguration("markers are collinear")

    if coplanar:
        starts = [_planar_init(X, xn, vt.T, mu)]
    elif len(X) >= 6:
        starts = [_dlt(X, xn)]
    else:
        starts = _multistart(X, xn)

    best = None
    for R0, t0 in starts:
        R, t, cost = _refine(R0, t0, X, xn)
        if best is None or cost < best[2]:
            best = (R, t, cost)
    R, t, _ = best
    T = RigidTransform(R, t)
    err = np.linalg.norm(intrinsic.with_extrinsic(T).project(X, check_depth=False) - px, axis=1)
    return T, float(err.mean())


# ---------------------------------------------------------------- time sync

def match_streams(reference, other, max_gap=DEFAULT_MAX_GAP_MS):
    """Match every reference frame to the nearest timestamp of `other` within max_gap ms.

    Equidistant candidates resolve to the earlier timestamp.
    """
    ref = reference.timestamps
    oth = other.timestamps
    if len(ref) == 0 or len(oth) == 0:
        return []
    right = np.clip(np.searchsorted(oth, ref, side="left"), 0, len(oth) - 1)
    left = np.clip(right - 1, 0, len(oth) - 1)
    use_left = np.abs(oth[left] - ref) <= np.abs(oth[right] - ref)
    idx = np.where(use_left, left, right)
    dt = oth[idx] - ref
    return [StreamMatch(int(i), int(j), float(d)) for i, (j, d) in enumerate(zip(idx, dt)) if abs(d) <= max_gap]


# ---------------------------------------------------------------- JSON lines

def _read_jsonl(path):
    records = []
    for lineno, line in enumerate(Path(path).read_text().splitlines(), 1):
        if not line.strip():
            continue
        try:
            records.append((lineno, json.loads(line)))
        except json.JSONDecodeError as exc:
            raise SchemaError(f"{path}:{lineno}: invalid JSON ({exc.msg})") from exc
    return records


def load_observations(path):
    """Calibration records: {"camera_id", "marker_world": [x,y,z], "pixel": [u,v]} -> {camera_id: [obs]}."""
    out = {}
    for lineno, rec in _read_jsonl(path):
        try:
            cam = str(rec["camera_id"])
            obs = CalibrationObservation(tuple(map(float, rec["marker_world"])), tuple(map(float, rec["pixel"])))
        except (KeyError, TypeError, ValueError) as exc:
            raise SchemaError(f"{path}:{lineno}: bad calibration record ({exc!r})") from exc
        if len(obs.marker_world) != 3 or len(obs.pixel) != 2:
            raise SchemaError(f"{path}:{lineno}: marker_world needs 3 values and pixel 2")
        out.setdefault(cam, []).append(obs)
    return out


def save_observations(path, by_camera):
    with open(path, "w") as fh:
        for cam, obs in by_camera.items():
            for o in obs:
                fh.write(json.dumps({"camera_id": cam, "marker_world": list(o.marker_world), "pixel": list(o.pixel)}) + "\n")


def load_streams(path):
    """Timestamp records: {"sensor_id", "timestamps": [ms, ...]} -> {sensor_id: TimestampStream}."""
    out = {}
    for lineno, rec in _read_jsonl(path):
        try:
            s = TimestampStream(str(rec["sensor_id"]), np.asarray(rec["timestamps"], dtype=float))
        except (KeyError, TypeError, ValueError) as exc:
            raise SchemaError(f"{path}:{lineno}: bad timestamp record ({exc!r})") from exc
        except InvariantViolation as exc:
            raise SchemaError(f"{path}:{lineno}: {exc}") from exc
        out[s.sensor_id] = s
    return out


def save_streams(path, streams):
    with open(path, "w") as fh:
        for s in streams:
            fh.write(json.dumps({"sensor_id": s.sensor_id, "timestamps": s.timestamps.tolist()}) + "\n")
