"""Pinhole camera with optional two-term radial distortion, and ray triangulation."""

import json
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from ..errors import DegenerateBaseline, InvariantViolation, NearParallelRays, NonPositiveDepth, SchemaError
from .transform import RigidTransform

MIN_DEPTH = 1e-9
MIN_BASELINE = 1e-6
MIN_RAY_ANGLE = np.deg2rad(0.1)


@dataclass(frozen=True, eq=False)
class CameraModel:
    fx: float
    fy: float
    cx: float
    cy: float
    extrinsic: RigidTransform = field(default_factory=RigidTransform.identity)  # world -> camera
    k1: float = 0.0
    k2: float = 0.0
    width: int | None = None
    height: int | None = None
    name: str = ""

    def __post_init__(self):
        if not (self.fx > 0 and self.fy > 0):
            raise InvariantViolation("focal lengths must be positive")

    @property
    def K(self):
        return np.array([[self.fx, 0.0, self.cx], [0.0, self.fy, self.cy], [0.0, 0.0, 1.0]])

    @property
    def center(self):
        """Camera center in world coordinates."""
        R, t = self.extrinsic.rotation, self.extrinsic.translation
        return -R.T @ t

    @property
    def has_distortion(self):
        return self.k1 != 0.0 or self.k2 != 0.0

    def with_extrinsic(self, extrinsic):
        return replace(self, extrinsic=extrinsic)

    def to_camera(self, points):
        return self.extrinsic.apply(points)

    def project(self, points, check_depth=True):
        """World points (..., 3) -> pixels (..., 2)."""
        pc = self.to_camera(points)
        z = pc[..., 2]
        if check_depth and np.any(z <= MIN_DEPTH):
            raise NonPositiveDepth("point behind or on the camera plane")
        x = pc[..., 0] / z
        y = pc[..., 1] / z
        if self.has_distortion:
            r2 = x * x + y * y
            f = 1.0 + self.k1 * r2 + self.k2 * r2 * r2
            x, y = x * f, y * f
        return np.stack([self.fx * x + self.cx, self.fy * y + self.cy], axis=-1)

    def project_jacobian(self, points):
        """Pixels and d(pixel)/d(world point), shapes (..., 2) and (..., 2, 3).

        Depth is not checked; callers keep points in front of the camera.
        """
        R = self.extrinsic.rotation
        pc = self.to_camera(points)
        X, Y, Z = pc[..., 0], pc[..., 1], pc[..., 2]
        iz = 1.0 / Z
        x, y = X * iz, Y * iz
        # d(x, y)/d(X, Y, Z)
        dn = np.zeros(pc.shape[:-1] + (2, 3))
        dn[..., 0, 0] = iz
        dn[..., 0, 2] = -x * iz
        dn[..., 1, 1] = iz
        dn[..., 1, 2] = -y * iz
        if self.has_distortion:
            r2 = x * x + y * y
            f = 1.0 + self.k1 * r2 + self.k2 * r2 * r2
            df = self.k1 + 2.0 * self.k2 * r2  # d f / d r2
            D = np.empty(pc.shape[:-1] + (2, 2))
            D[..., 0, 0] = f + 2.0 * x * x * df
            D[..., 0, 1] = 2.0 * x * y * df
            D[..., 1, 0] = 2.0 * x * y * df
            D[..., 1, 1] = f + 2.0 * y * y * df
            dn = D @ dn
            x, y = x * f, y * f
        px = np.stack([self.fx * x + self.cx, self.fy * y + self.cy], axis=-1)
        scale = np.array([self.fx, self.fy])[:, None]
        return px, (scale * dn) @ R

    def normalized(self, pixels, iterations=20):
        """Pixels -> undistorted normalized image coordinates (..., 2)."""
        pixels = np.asarray(pixels, dtype=float)
        xd = (pixels[..., 0] - self.cx) / self.fx
        yd = (pixels[..., 1] - self.cy) / self.fy
        if not self.has_distortion:
            return np.stack([xd, yd], axis=-1)
        x, y = xd.copy(), yd.copy()
        for _ in range(iterations):
            r2 = x * x + y * y
            f = 1.0 + self.k1 * r2 + self.k2 * r2 * r2
            x, y = xd / f, yd / f
        return np.stack([x, y], axis=-1)

    def rays(self, pixels):
        """Back-project pixels to unit world-space directions."""
        n = self.normalized(pixels)
        d = np.concatenate([n, np.ones(n.shape[:-1] + (1,))], axis=-1)
        d = d @ self.extrinsic.rotation  # R^T d, row-wise
        return d / np.linalg.norm(d, axis=-1, keepdims=True)

    def to_dict(self):
        d = {"id": self.name, "fx": self.fx, "fy": self.fy, "cx": self.cx, "cy": self.cy,
             "k1": self.k1, "k2": self.k2, "width": self.width, "height": self.height}
        d.update(self.extrinsic.to_dict())
        return d

    @classmethod
    def from_dict(cls, d):
        ext = RigidTransform.from_dict(d) if "R" in d else RigidTransform.identity()
        return cls(float(d["fx"]), float(d["fy"]), float(d["cx"]), float(d["cy"]), ext,
                   float(d.get("k1", 0.0)), float(d.get("k2", 0.0)),
                   d.get("width"), d.get("height"), str(d.get("id", "")))


def project(camera, point):
    """Project a single world point to a pixel. Raises NonPositiveDepth."""
    return camera.project(np.asarray(point, dtype=float))


def closest_points_on_rays(oa, da, ob, db):
    """Midpoints of the common perpendicular for batches of ray pairs.

    Directions must be unit length. Returns (midpoints, sin of ray angle).
    """
    w = oa - ob
    b = np.sum(da * db, axis=-1)
    d = np.sum(da * w, axis=-1)
    e = np.sum(db * w, axis=-1)
    denom = 1.0 - b * b
    safe = np.where(denom > 0, denom, 1.0)
    s = (b * e - d) / safe
    u = (e - b * d) / safe
    mid = 0.5 * ((oa + s[..., None] * da) + (ob + u[..., None] * db))
    sin_angle = np.sqrt(np.clip(denom, 0.0, None))
    return mid, sin_angle


def triangulate_pair(cam_a, cam_b, px_a, px_b):
    """Least-squares intersection of two back-projected rays."""
    ca, cb = cam_a.center, cam_b.center
    if np.linalg.norm(ca - cb) <= MIN_BASELINE:
        raise DegenerateBaseline("camera centers coincide")
    da = cam_a.rays(np.asarray(px_a, dtype=float))
    db = cam_b.rays(np.asarray(px_b, dtype=float))
    mid, sin_angle = closest_points_on_rays(ca, da, cb, db)
    if sin_angle < np.sin(MIN_RAY_ANGLE):
        raise NearParallelRays("rays are nearly parallel")
    return mid


def triangulate_rays(origins, directions):
    """Point minimizing the summed squared distance to N >= 2 rays (unit directions)."""
    A = np.zeros((3, 3))
    b = np.zeros(3)
    for o, d in zip(origins, directions):
        P = np.eye(3) - np.outer(d, d)
        A += P
        b += P @ o
    return np.linalg.solve(A, b)


def save_cameras(cameras, path):
    """{"cameras": [{"id", "fx", "fy", "cx", "cy", "k1", "k2", "width", "height", "R", "t"}]}."""
    doc = {"cameras": [c.to_dict() for c in cameras]}
    Path(path).write_text(json.dumps(doc, indent=1, sort_keys=True) + "\n")


def load_cameras(path):
    try:
        doc = json.loads(Path(path).read_text())
        cams = [CameraModel.from_dict(d) for d in doc["cameras"]]
    except json.JSONDecodeError as exc:
        raise SchemaError(f"{path}: invalid JSON ({exc.msg} at line {exc.lineno})") from exc
    except (KeyError, TypeError, ValueError, InvariantViolation) as exc:
        raise SchemaError(f"{path}: bad camera record ({exc!r})") from exc
    ids = [c.name for c in cams]
    if len(set(ids)) != len(ids):
        raise SchemaError(f"{path}: camera ids must be unique")
    return cams
