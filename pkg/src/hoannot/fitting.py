"""Two-stage hand pose fitting over sliding temporal windows.

Stage 1 fits keypoints (2D reprojection, 3D fused joints) with joint-angle limits and
temporal smoothness. Stage 2 continues from stage 1 and adds attraction toward and
penetration against the hand's contact object. The object terms are evaluated in the
object frame; the right hand pairs with the tool and the left hand with the target.
"""

import json
from dataclasses import asdict, dataclass, field, fields

import numpy as np

from .errors import InvalidSpec, NonFiniteLoss, WindowTooShort
from .geometry.align import rigid_align
from .geometry.mesh import build_index
from .geometry.rotations import matrix_to_rotvec
from .hand_model import NUM_JOINTS, HandPoseParams, PoseCache
from .optim import Adam

LOSS_NAMES = ("2d", "3d", "angle", "temporal", "attraction", "penetration")
PALM_JOINTS = (0, 1, 4, 7, 10, 13)


@dataclass(frozen=True)
class FittingWeights:
    lambda_2d: float = 1e-4
    lambda_3d: float = 1.0
    lambda_angle: float = 10.0
    lambda_tc: float = 1.0
    lambda_a: float = 1.0
    lambda_p: float = 10.0
    radius: float = 0.01
    lr: float = 1e-3
    lr_final: float = 1e-3  # learning rate at the last step of each stage (geometric decay)
    stage1_iterations: int = 300
    stage2_iterations: int = 200
    window: int = 10
    overlap: int = 5
    warmup_iterations: int = 300  # extra single-frame stage-1 steps on the first frame
    warmup_lr: float = 1e-2

    def __post_init__(self):
        for f in ("lambda_2d", "lambda_3d", "lambda_angle", "lambda_tc", "lambda_a", "lambda_p"):
            if not getattr(self, f) >= 0:
                raise InvalidSpec(f"{f} must be >= 0")
        if not (self.radius > 0 and self.lr > 0 and self.lr_final > 0 and self.warmup_lr > 0):
            raise InvalidSpec("radius and learning rates must be > 0")
        if self.window < 1 or not 0 <= self.overlap < self.window:
            raise InvalidSpec("need window >= 1 and 0 <= overlap < window")
        if min(self.stage1_iterations, self.stage2_iterations, self.warmup_iterations) < 0:
            raise InvalidSpec("iteration counts must be >= 0")

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, d):
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise InvalidSpec(f"unknown fitting settings: {sorted(unknown)}")
        return cls(**d)


# ---------------------------------------------------------------- loss terms
# Each *_terms function works on a batch of frames and returns (per-frame values, gradient).

def reprojection_terms(joints, cameras, pixels, gate):
    """Gated squared pixel error; joints (F, 21, 3), pixels (F, C, 21, 2), gate (F, C, 21)."""
    F = len(joints)
    value = np.zeros(F)
    grad = np.zeros_like(joints)
    for c, cam in enumerate(cameras):
        g = gate[:, c]
        if not g.any():
            continue
        depth = cam.to_camera(joints)[..., 2]
        g = g & (depth > 1e-9)
        px, jac = cam.project_jacobian(np.where(g[..., None], joints, cam.center + cam.extrinsic.rotation[2]))
        r = np.where(g[..., None], px - pixels[:, c], 0.0)
        value += np.einsum("fjk,fjk->f", r, r)
        grad += 2.0 * np.einsum("fjk,fjkl->fjl", r, jac)
    return value, grad


def keypoint3d_terms(joints, targets, present):
    diff = np.where(present[..., None], joints - np.nan_to_num(targets), 0.0)
    return np.einsum("fjk,fjk->f", diff, diff), 2.0 * diff


def angle_terms(theta, lower, upper):
    """One-sided linear bound violations over the 45 articulation angles (global rotation exempt)."""
    a = theta[:, 3:]
    lo = np.maximum(lower - a, 0.0)
    hi = np.maximum(a - upper, 0.0)
    grad = np.zeros_like(theta)
    grad[:, 3:] = (a > upper).astype(float) - (a < lower).astype(float)
    return lo.sum(axis=1) + hi.sum(axis=1), grad


def temporal_terms(theta, t):
    """Translation velocity plus pose acceleration at window indices i >= 2."""
    W = len(theta)
    if W < 3:
        raise WindowTooShort(f"temporal term needs >= 3 frames, got {W}")
    dt = t[2:] - t[1:-1]
    acc = theta[2:] - 2.0 * theta[1:-1] + theta[:-2]
    value = np.zeros(W)
    value[2:] = np.einsum("ij,ij->i", dt, dt) + np.einsum("ij,ij->i", acc, acc)
    gt = np.zeros_like(t)
    gt[2:] += 2.0 * dt
    gt[1:-1] -= 2.0 * dt
    gth = np.zeros_like(theta)
    gth[2:] += 2.0 * acc
    gth[1:-1] -= 4.0 * acc
    gth[:-2] += 2.0 * acc
    return value, gth, gt


def _to_object(vertices, pose):
    if pose is None:
        return vertices
    return (vertices - pose.translation) @ pose.rotation


def contact_terms(vertices, mesh, index=None, radius=0.01, pose=None):
    """Attraction and penetration terms sharing one nearest-vertex query.

    vertices (N, 3) in world coordinates; `pose` maps object to world. Returns
    ((attraction values, gradient), (penetration values, gradient)), gradients in world axes.
    """
    index = build_index(mesh) if index is None else index
    x = _to_object(vertices, pose)
    i, d = index.query(x)
    diff = x - mesh.vertices[i]
    # squared distance to the nearest object vertex, for hand vertices strictly within `radius`
    near = np.where((d < radius)[:, None], diff, 0.0)
    ga = 2.0 * near
    # depth behind the tangent plane of the nearest object vertex
    n = mesh.vertex_normals[i]
    depth = -np.einsum("ij,ij->i", n, diff)
    inside = depth > 0
    gp = np.where(inside[:, None], -n, 0.0)
    if pose is not None:
        ga, gp = ga @ pose.rotation.T, gp @ pose.rotation.T
    return (np.einsum("ij,ij->i", near, near), ga), (np.where(inside, depth, 0.0), gp)


def attraction_terms(vertices, mesh, index=None, radius=0.01, pose=None):
    """Squared distance to the nearest object vertex for hand vertices strictly within `radius`."""
    return contact_terms(vertices, mesh, index, radius, pose)[0]


def penetration_terms(vertices, mesh, index=None, pose=None):
    """Depth behind the tangent plane of the nearest object vertex, per hand vertex."""
    return contact_terms(vertices, mesh, index, 0.01, pose)[1]


def loss_2d(state, cameras, obs, valid):
    """Sum over cameras and joints of valid-gated squared reprojection error (px^2)."""
    gate = np.asarray(valid, dtype=bool) & obs.present & np.all(np.isfinite(obs.pixels), axis=-1)
    v, _ = reprojection_terms(state.joints[None], cameras, obs.pixels[None], gate[None])
    return float(v[0])


def loss_3d(state, fused):
    present = fused.present & np.all(np.isfinite(fused.points), axis=-1)
    v, _ = keypoint3d_terms(state.joints[None], fused.points[None], present[None])
    return float(v[0])


def loss_angle(params, lower, upper):
    v, _ = angle_terms(np.asarray(params.theta, dtype=float)[None], lower, upper)
    return float(v[0])


def loss_temporal(params_window):
    theta = np.stack([p.theta for p in params_window])
    t = np.stack([p.t for p in params_window])
    return float(temporal_terms(theta, t)[0].sum())


def loss_attraction(state, mesh, index=None, radius=0.01, pose=None):
    return float(attraction_terms(state.vertices, mesh, index, radius, pose)[0].sum())


def loss_penetration(state, mesh, index=None, pose=None):
    return float(penetration_terms(state.vertices, mesh, index, pose)[0].sum())


# ---------------------------------------------------------------- sequence fitting

@dataclass
class HandTrack:
    """Inputs for one hand over a sequence; per-frame lists may hold None for missing data."""

    model: object
    beta: np.ndarray
    keypoints: list
    fused: list
    mesh: object = None
    poses: list = None  # per-frame RigidTransform, object to world
    init: HandPoseParams = None


@dataclass
class SequenceFit:
    frames: list
    params: dict  # hand -> list[HandPoseParams]
    losses: dict  # hand -> (F, 6) unweighted per-frame terms, columns LOSS_NAMES
    diagnostics: dict = field(default_factory=dict)
    failures: dict = field(default_factory=dict)  # hand -> {frame: reason}

    def records(self):
        out = []
        for k, frame in enumerate(self.frames):
            rec = {"frame": int(frame)}
            for hand in ("left", "right"):
                rec[hand] = self.params[hand][k].to_dict() if hand in self.params else None
            rec["losses"] = {hand: dict(zip(LOSS_NAMES, map(float, self.losses[hand][k])))
                             for hand in sorted(self.losses)}
            out.append(rec)
        return out


class _Problem:
    """Window objective for one hand, with observations stacked over the whole sequence."""

    def __init__(self, track, cameras, weights):
        self.track = track
        self.model = track.model
        self.beta = np.asarray(track.beta, dtype=float)
        self.weights = weights
        self.cameras = list(cameras)
        ids = [c.name for c in self.cameras]
        col = {cid: c for c, cid in enumerate(ids)}
        F = len(track.keypoints)
        C = len(ids)
        self.pixels = np.zeros((F, C, NUM_JOINTS, 2))
        self.gate = np.zeros((F, C, NUM_JOINTS), dtype=bool)
        self.targets = np.zeros((F, NUM_JOINTS, 3))
        self.present = np.zeros((F, NUM_JOINTS), dtype=bool)
        for f in range(F):
            obs, fused = track.keypoints[f], track.fused[f]
            if fused is not None:
                self.targets[f] = np.nan_to_num(fused.points)
                self.present[f] = fused.present & np.all(np.isfinite(fused.points), axis=-1)
            if obs is None:
                continue
            valid_rows = {}
            if fused is not None:
                valid_rows = {cid: fused.valid[r] for r, cid in enumerate(fused.camera_ids)}
            for r, cid in enumerate(obs.camera_ids):
                if cid not in col:
                    continue
                ok = obs.present[r] & np.all(np.isfinite(obs.pixels[r]), axis=-1)
                if fused is not None:
                    ok = ok & valid_rows.get(cid, np.zeros(NUM_JOINTS, dtype=bool))
                self.pixels[f, col[cid]] = np.nan_to_num(obs.pixels[r])
                self.gate[f, col[cid]] = ok
        self.contact = (track.mesh is not None and track.poses is not None
                        and (weights.lambda_a > 0 or weights.lambda_p > 0))
        self.index = build_index(track.mesh) if self.contact else None

    def evaluate(self, frames, theta, t, stage, temporal=True):
        """Weighted total, gradients and unweighted per-frame terms (W, 6) for a window."""
        w = self.weights
        W = len(frames)
        contact = stage == 2 and self.contact
        cache = PoseCache(self.model, theta, t, self.beta, joints_only=not contact)
        J = cache.joints
        terms = np.zeros((W, len(LOSS_NAMES)))
        gJ = np.zeros_like(J)
        gV = None
        v, g = reprojection_terms(J, self.cameras, self.pixels[frames], self.gate[frames])
        terms[:, 0] = v
        gJ += w.lambda_2d * g
        v, g = keypoint3d_terms(J, self.targets[frames], self.present[frames])
        terms[:, 1] = v
        gJ += w.lambda_3d * g
        v, g_th = angle_terms(theta, self.model.lower, self.model.upper)
        terms[:, 2] = v
        g_th = w.lambda_angle * g_th
        g_t = np.zeros_like(t)
        if temporal and W >= 3:
            v, gth2, gt2 = temporal_terms(theta, t)
            terms[:, 3] = v
            g_th += w.lambda_tc * gth2
            g_t += w.lambda_tc * gt2
        if contact:
            gV = np.zeros_like(cache.vertices)
            for k, f in enumerate(frames):
                pose = self.track.poses[f]
                if pose is None:
                    continue
                (va, ga), (vp, gp) = contact_terms(cache.vertices[k], self.track.mesh, self.index, w.radius, pose)
                if w.lambda_a > 0:
                    terms[k, 4] = va.sum()
                    gV[k] += w.lambda_a * ga
                if w.lambda_p > 0:
                    terms[k, 5] = vp.sum()
                    gV[k] += w.lambda_p * gp
        a, b = cache.vjp(gV, gJ)
        lam = np.array([w.lambda_2d, w.lambda_3d, w.lambda_angle, w.lambda_tc, w.lambda_a, w.lambda_p])
        total = float((terms * lam).sum())
        return total, g_th + a, g_t + b, terms

    def optimize(self, frames, theta, t, stage, iterations, lr, lr_final, temporal=True):
        """Adam over (theta, t); returns params, initial and final totals."""
        if iterations == 0:
            f0 = self.evaluate(frames, theta, t, stage, temporal)[0]
            return theta, t, f0, f0
        opt = Adam(lr)
        x = np.concatenate([theta, t], axis=1)
        decay = (lr_final / lr) ** (1.0 / max(iterations - 1, 1))
        first = None
        for it in range(iterations):
            f, g_th, g_t, _ = self.evaluate(frames, x[:, :48], x[:, 48:], stage, temporal)
            if not np.isfinite(f) or not (np.all(np.isfinite(g_th)) and np.all(np.isfinite(g_t))):
                raise NonFiniteLoss(f"non-finite objective at stage {stage}, step {it}")
            if first is None:
                first = f
            x = opt.step(x, np.concatenate([g_th, g_t], axis=1), lr * decay ** it)
        last = self.evaluate(frames, x[:, :48], x[:, 48:], stage, temporal)[0]
        if not np.isfinite(last):
            raise NonFiniteLoss(f"non-finite objective after stage {stage}")
        return x[:, :48], x[:, 48:], first, last


def initial_params(model, beta, fused):
    """Rest pose rigidly aligned to the fused palm joints (wrist and finger bases)."""
    theta = np.zeros(48)
    t = np.zeros(3)
    if fused is None:
        return theta, t
    rest = PoseCache(model, theta[None], t[None], beta, joints_only=True).joints[0]
    ok = fused.present & np.all(np.isfinite(fused.points), axis=-1)
    ids = [j for j in PALM_JOINTS if ok[j]]
    if len(ids) < 3:
        ids = list(np.flatnonzero(ok))
    if len(ids) == 0:
        return theta, t
    try:
        T, _ = rigid_align(rest[ids], fused.points[ids])
    except Exception:
        t = fused.points[ids].mean(axis=0) - rest[ids].mean(axis=0)
        return theta, t
    J0 = model.shaped(beta)[1][0]
    theta[:3] = matrix_to_rotvec(T.rotation)
    t = T.translation + T.rotation @ J0 - J0
    return theta, t


def window_starts(n_frames, window, overlap):
    if n_frames <= window:
        return [0]
    step = window - overlap
    starts = list(range(0, n_frames - window, step))
    starts.append(n_frames - window)
    return sorted(set(starts))


def fit_hand(track, cameras, weights=FittingWeights()):
    """Fit one hand over its sequence. Returns (theta (F, 48), t (F, 3), losses (F, 6), diagnostics)."""
    prob = _Problem(track, cameras, weights)
    F = len(track.keypoints)
    beta = prob.beta
    if track.init is not None:
        theta0, t0 = np.array(track.init.theta), np.array(track.init.t)
    else:
        theta0, t0 = initial_params(track.model, beta, next((x for x in track.fused if x is not None), None))
    theta_out = np.tile(theta0, (F, 1))
    t_out = np.tile(t0, (F, 1))
    diag = {"windows": [], "failures": {}}

    if weights.warmup_iterations > 0 and F > 0:
        th, tt, _, _ = prob.optimize([0], theta_out[:1], t_out[:1], 1, weights.warmup_iterations,
                                     weights.warmup_lr, weights.lr, temporal=False)
        theta_out[:] = th[0]
        t_out[:] = tt[0]

    window = weights.window
    temporal = True
    if min(window, F) < 3:
        window, temporal = 1, False
        diag["fallback"] = "per-frame fit without temporal term (window shorter than 3 frames)"
        starts = list(range(F))
    else:
        starts = window_starts(F, window, weights.overlap)
    fitted = 0  # frames [0, fitted) hold results
    for s in starts:
        e = min(s + window, F)
        frames = list(range(s, e))
        theta = theta_out[s:e].copy()
        t = t_out[s:e].copy()
        if fitted < e and fitted > 0:
            theta[max(fitted - s, 0):] = theta_out[fitted - 1]
            t[max(fitted - s, 0):] = t_out[fitted - 1]
        info = {"start": s, "stop": e}
        try:
            theta, t, a, b = prob.optimize(frames, theta, t, 1, weights.stage1_iterations,
                                           weights.lr, weights.lr_final, temporal)
            info["stage1"] = [a, b]
            theta, t, a, b = prob.optimize(frames, theta, t, 2, weights.stage2_iterations,
                                           weights.lr, weights.lr_final, temporal)
            info["stage2"] = [a, b]
        except NonFiniteLoss as exc:
            for f in frames:
                diag["failures"][f] = str(exc)
            info["error"] = str(exc)
            diag["windows"].append(info)
            fitted = max(fitted, e)
            continue
        diag["windows"].append(info)
        blend_stop = min(fitted, e)
        for k, f in enumerate(frames):
            if f < blend_stop:
                w = (f - s + 1) / (blend_stop - s + 1)
                theta_out[f] = (1.0 - w) * theta_out[f] + w * theta[k]
                t_out[f] = (1.0 - w) * t_out[f] + w * t[k]
            else:
                theta_out[f] = theta[k]
                t_out[f] = t[k]
        fitted = max(fitted, e)
    losses = prob.evaluate(list(range(F)), theta_out, t_out, 2, temporal)[3] if F else np.zeros((0, 6))
    return theta_out, t_out, losses, diag


def fit_sequence(cameras, hands, weights=FittingWeights(), frames=None):
    """Fit each hand in `hands` ({"left"|"right": HandTrack}) independently."""
    params, losses, diagnostics, failures = {}, {}, {}, {}
    n = None
    for name in sorted(hands):
        track = hands[name]
        if n is not None and len(track.keypoints) != n:
            raise InvalidSpec("hands must cover the same frames")
        n = len(track.keypoints)
        theta, t, L, diag = fit_hand(track, cameras, weights)
        params[name] = [HandPoseParams(theta[k], track.beta, t[k]) for k in range(n)]
        losses[name] = L
        failures[name] = diag.pop("failures")
        diagnostics[name] = diag
    frames = list(range(n or 0)) if frames is None else list(frames)
    return SequenceFit(frames, params, losses, diagnostics, failures)


def save_sequence_fit(fit, path):
    with open(path, "w") as fh:
        for rec in fit.records():
            fh.write(json.dumps(rec, sort_keys=True) + "\n")
