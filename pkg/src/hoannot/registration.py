"""Marker-rig to object-mesh registration and per-frame object poses from tracked markers."""

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import HighResidual, InvariantViolation, NoActiveMarkers, SchemaError, TooFewMarkers
from .geometry.align import rigid_align
from .geometry.mesh import build_index
from .geometry.rotations import left_jacobian, rotvec_to_matrix
from .geometry.transform import RigidTransform
from .optim import Adam

DEFAULT_ALPHA = 0.01  # m
DEFAULT_LR = 1e-4
DEFAULT_MAX_ITER = 20000
MAX_TRACKING_RMS = 0.005  # m


@dataclass(frozen=True, eq=False)
class MarkerRig:
    marker_local: np.ndarray  # (K, 3) rig coordinates, meters
    tracked: tuple = (0, 1, 2, 3)  # markers visible to the mocap system during capture
    marker_radius: float = 0.004
    name: str = ""

    def __post_init__(self):
        q = np.array(self.marker_local, dtype=float).reshape(-1, 3)
        tracked = tuple(int(i) for i in self.tracked)
        if len(q) < 3:
            raise InvariantViolation("a marker rig needs at least 3 markers")
        if len(tracked) < 3 or len(set(tracked)) != len(tracked) or max(tracked) >= len(q) or min(tracked) < 0:
            raise InvariantViolation("tracked subset must name >= 3 distinct markers")
        sv = np.linalg.svd(q - q.mean(axis=0), compute_uv=False)
        if sv[1] <= 1e-9 * max(sv[0], 1e-300):
            raise InvariantViolation("rig markers are collinear")
        q.setflags(write=False)
        object.__setattr__(self, "marker_local", q)
        object.__setattr__(self, "tracked", tracked)


@dataclass
class RegistrationResult:
    T_star: RigidTransform  # rig coordinates -> object-model coordinates
    contact: np.ndarray  # per-marker L_c at T_star
    penetration: np.ndarray  # per-marker L_p at T_star
    active: np.ndarray  # L_c < alpha at T_star
    objective: float
    iterations: int
    history: list = field(default_factory=list)


def _index(mesh, index):
    return build_index(mesh) if index is None else index


def contact_terms(points, mesh, index=None):
    """Nearest-vertex ids, contact distances and penetration depths for query points (N, 3)."""
    index = _index(mesh, index)
    pts = np.asarray(points, dtype=float).reshape(-1, 3)
    i, d = index.query(pts)
    diff = pts - mesh.vertices[i]
    depth = -np.einsum("ij,ij->i", mesh.vertex_normals[i], diff)
    return i, d, np.maximum(depth, 0.0)


def contact_loss(q, mesh, index=None):
    """Distance from q to its nearest mesh vertex (m)."""
    _, d, _ = contact_terms(q, mesh, index)
    return float(d[0])


def penetration_loss(q, mesh, index=None):
    """Depth of q behind the tangent plane of its nearest vertex; 0 outside (m)."""
    _, _, p = contact_terms(q, mesh, index)
    return float(p[0])


def contact_gradient(points, mesh, index=None):
    """Per-point value and gradient of L_c + L_p, nearest vertex held fixed."""
    index = _index(mesh, index)
    pts = np.asarray(points, dtype=float).reshape(-1, 3)
    i, d, p = contact_terms(pts, mesh, index)
    diff = pts - mesh.vertices[i]
    safe = np.where(d > 0, d, 1.0)
    g = np.where(d[:, None] > 0, diff / safe[:, None], 0.0)
    g = g - np.where(p[:, None] > 0, mesh.vertex_normals[i], 0.0)
    return d + p, g, d, p


def surface_descent_direction(points, mesh, index=None):
    """Descent direction for L_c + L_p from the tangent plane at the nearest vertex.

    Vertices sample a continuous surface; the tangential part of the point-to-vertex
    gradient only pulls markers toward individual samples and creates spurious
    stationary points. This keeps the normal component: +n outside, -2n inside.
    """
    index = _index(mesh, index)
    pts = np.asarray(points, dtype=float).reshape(-1, 3)
    i, _, _ = contact_terms(pts, mesh, index)
    n = mesh.vertex_normals[i]
    side = np.einsum("ij,ij->i", pts - mesh.vertices[i], n)
    scale = np.where(side > 0, 1.0, np.where(side < 0, -2.0, 0.0))
    return scale[:, None] * n


def pose_gradient(x, rotated, point_grad):
    """Chain per-point gradients to the pose increment x = (rotvec, translation).

    Points are y = exp(x[:3]) R0 q + t0 + x[3:]; `rotated` holds exp(x[:3]) R0 q.
    """
    g_rot = left_jacobian(x[:3]).T @ np.sum(np.cross(rotated, point_grad), axis=0)
    return np.concatenate([g_rot, point_grad.sum(axis=0)])


def rig_objective(R, t, rig, mesh, index=None, alpha=DEFAULT_ALPHA, mask=None):
    """Gated sum of contact + penetration losses; returns (value, active mask)."""
    y = rig.marker_local @ R.T + t
    _, d, p = contact_terms(y, mesh, index)
    active = d < alpha if mask is None else mask
    return float(np.sum((d + p)[active])), d < alpha


def register_rig(rig, mesh, T_init, alpha=DEFAULT_ALPHA, lr=DEFAULT_LR, max_iter=DEFAULT_MAX_ITER,
                 index=None, tol=1e-8, gate_every=10, patience=100, gradient="surface", atol=1e-9):
    """Minimize the alpha-gated contact + penetration energy of all rig markers over SE(3) with Adam.

    Rotation is an axis-angle increment composed on the left of the initial rotation.
    The gate is re-evaluated every `gate_every` steps and frozen in between. Stops after
    `max_iter` steps, when the objective changes by less than `tol` (relative) over
    `patience` steps, or when it drops to `atol` (m). Adam steps have a fixed size whatever
    the gradient scale, so an already aligned rig must stop before the first step.

    `gradient="vertex"` descends the exact point-to-vertex sub-gradient; the default
    "surface" uses `surface_descent_direction`. The objective is the same either way.
    """
    if gradient not in ("surface", "vertex"):
        raise ValueError(f"unknown gradient mode {gradient!r}")
    if alpha <= 0:
        raise ValueError("alpha must be positive")
    index = _index(mesh, index)
    R0 = T_init.rotation
    t0 = T_init.translation
    q = rig.marker_local
    x = np.zeros(6)  # rotation increment, translation increment
    opt = Adam(lr=lr)

    f0, gate = rig_objective(R0, t0, rig, mesh, index, alpha)
    if not np.any(gate):
        raise NoActiveMarkers("no marker lies within alpha of the mesh at the initial pose")
    history = [f0]
    it = 0
    for it in range(1, max_iter + 1 if f0 > atol else 1):
        if (it - 1) % gate_every == 0:
            R = rotvec_to_matrix(x[:3]) @ R0
            gate = rig_objective(R, t0 + x[3:], rig, mesh, index, alpha)[1]
            if not np.any(gate):
                break
        R = rotvec_to_matrix(x[:3]) @ R0
        z = q @ R.T
        if gradient == "surface":
            g = surface_descent_direction(z + t0 + x[3:], mesh, index)
        else:
            _, g, _, _ = contact_gradient(z + t0 + x[3:], mesh, index)
        x = opt.step(x, pose_gradient(x, z, g * gate[:, None]))
        R = rotvec_to_matrix(x[:3]) @ R0
        f, _ = rig_objective(R, t0 + x[3:], rig, mesh, index, alpha)
        history.append(f)
        if f <= atol or (it >= patience and abs(history[-patience - 1] - f) <= tol * max(f, 1e-12)):
            break

    R = rotvec_to_matrix(x[:3]) @ R0
    u, _, vt = np.linalg.svd(R)
    T_star = RigidTransform(u @ vt, t0 + x[3:])
    y = T_star.apply(q)
    _, d, p = contact_terms(y, mesh, index)
    active = d < alpha
    return RegistrationResult(T_star, d, p, active, float(np.sum((d + p)[active])), it, history)


def frame_object_pose(rig, T_star, tracked_world, max_rms=MAX_TRACKING_RMS):
    """Object-model -> world pose for one frame from tracked marker positions.

    `tracked_world` rows follow `rig.tracked`; NaN rows mark markers not seen this frame.
    Returns (pose, rms). Raises HighResidual (pose attached) if rms exceeds max_rms.
    """
    world = np.asarray(tracked_world, dtype=float).reshape(-1, 3)
    if len(world) != len(rig.tracked):
        raise ValueError(f"expected {len(rig.tracked)} tracked rows, got {len(world)}")
    seen = np.all(np.isfinite(world), axis=1)
    if seen.sum() < 3:
        raise TooFewMarkers(f"{int(seen.sum())} tracked marker(s) visible")
    src = T_star.apply(rig.marker_local[list(rig.tracked)])[seen]
    pose, _ = rigid_align(src, world[seen])
    rms = float(np.sqrt(np.mean(np.sum((pose.apply(src) - world[seen]) ** 2, axis=1))))
    if rms > max_rms:
        raise HighResidual(f"marker fit RMS {rms * 1000:.2f} mm exceeds {max_rms * 1000:.1f} mm", pose, rms)
    return pose, rms


# ---------------------------------------------------------------- files

def load_rigs(path):
    """{"objects": {name: {"marker_local", "tracked", "marker_radius", "T_init"?: {"R","t"}, "mesh"?}}}."""
    try:
        doc = json.loads(Path(path).read_text())
        out = {}
        for name, d in doc["objects"].items():
            rig = MarkerRig(np.asarray(d["marker_local"], dtype=float), tuple(d.get("tracked", (0, 1, 2, 3))),
                            float(d.get("marker_radius", 0.004)), name)
            T_init = RigidTransform.from_dict(d["T_init"]) if "T_init" in d else None
            out[name] = (rig, T_init, d.get("mesh"))
        return out
    except json.JSONDecodeError as exc:
        raise SchemaError(f"{path}: invalid JSON ({exc.msg} at line {exc.lineno})") from exc
    except (KeyError, TypeError, ValueError, InvariantViolation) as exc:
        raise SchemaError(f"{path}: bad rig description ({exc!r})") from exc


def rig_record(rig, T_init=None, mesh=None):
    d = {"marker_local": rig.marker_local.tolist(), "tracked": list(rig.tracked), "marker_radius": rig.marker_radius}
    if T_init is not None:
        d["T_init"] = T_init.to_dict()
    if mesh is not None:
        d["mesh"] = mesh
    return d


def load_marker_tracks(path):
    """Per-frame records {"frame", "object", "timestamp"?, "markers": [{"id","x","y","z","visible"}]}.

    Returns {object: {"frames": [...], "timestamps": [...], "positions": (F, K, 3) with NaN when hidden}}.
    """
    rows = {}
    for lineno, line in enumerate(Path(path).read_text().splitlines(), 1):
        if not line.strip():
            continue
        try:
            rec = json.loads(line)
            obj = str(rec.get("object", ""))
            markers = {}
            for m in rec["markers"]:
                pos = (float(m["x"]), float(m["y"]), float(m["z"]))
                markers[int(m["id"])] = pos if m.get("visible", True) else (np.nan,) * 3
            rows.setdefault(obj, []).append((int(rec["frame"]), rec.get("timestamp"), markers))
        except json.JSONDecodeError as exc:
            raise SchemaError(f"{path}:{lineno}: invalid JSON ({exc.msg})") from exc
        except (KeyError, TypeError, ValueError) as exc:
            raise SchemaError(f"{path}:{lineno}: bad marker record ({exc!r})") from exc
    out = {}
    for obj, recs in rows.items():
        recs.sort(key=lambda r: r[0])
        K = 1 + max((max(m) for _, _, m in recs if m), default=-1)
        pos = np.full((len(recs), K, 3), np.nan)
        for f, (_, _, m) in enumerate(recs):
            for k, p in m.items():
                pos[f, k] = p
        out[obj] = {"frames": [r[0] for r in recs],
                    "timestamps": [r[1] for r in recs],
                    "positions": pos}
    return out
