"""Parametric articulated hand: shape blend, kinematic tree, linear blend skinning.

A MANO-compatible formulation without pose-corrective blendshapes. Pose is 16 axis-angle
triples (global rotation first, then 15 finger joints), shape is 10 coefficients held
fixed during fitting, and the translation moves the wrist.
"""

import json
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import InvariantViolation, ParseError
from .geometry.rotations import left_jacobian, rotvec_to_matrix, skew

NUM_KIN_JOINTS = 16
NUM_JOINTS = 21
NUM_BETAS = 10
NUM_ANGLES = 45

# kinematic order: wrist, index(3), middle(3), pinky(3), ring(3), thumb(3); tips appended
MANO_PARENTS = (-1, 0, 1, 2, 0, 4, 5, 0, 7, 8, 0, 10, 11, 0, 13, 14)
MANO_TIP_VERTICES = (317, 444, 673, 556, 745)
FINGERS = ("index", "middle", "pinky", "ring", "thumb")

MAGIC = b"HOHAND01"


@dataclass(frozen=True)
class HandPoseParams:
    theta: np.ndarray  # (48,) radians
    beta: np.ndarray  # (10,)
    t: np.ndarray  # (3,) meters

    def __post_init__(self):
        theta = np.asarray(self.theta, dtype=float).reshape(48)
        beta = np.asarray(self.beta, dtype=float).reshape(NUM_BETAS)
        t = np.asarray(self.t, dtype=float).reshape(3)
        if not (np.all(np.isfinite(theta)) and np.all(np.isfinite(beta)) and np.all(np.isfinite(t))):
            raise InvariantViolation("hand parameters must be finite")
        object.__setattr__(self, "theta", theta)
        object.__setattr__(self, "beta", beta)
        object.__setattr__(self, "t", t)

    @classmethod
    def rest(cls, beta=None):
        return cls(np.zeros(48), np.zeros(NUM_BETAS) if beta is None else beta, np.zeros(3))

    def to_dict(self):
        return {"theta": self.theta.tolist(), "beta": self.beta.tolist(), "t": self.t.tolist()}

    @classmethod
    def from_dict(cls, d):
        return cls(d["theta"], d["beta"], d["t"])


@dataclass(frozen=True)
class HandState:
    joints: np.ndarray  # (21, 3)
    vertices: np.ndarray  # (N, 3)


@dataclass(frozen=True, eq=False)
class HandModel:
    template: np.ndarray  # (N, 3)
    shapedirs: np.ndarray  # (N, 3, 10)
    parents: np.ndarray  # (16,)
    weights: np.ndarray  # (N, 16)
    joint_regressor: np.ndarray  # (16, N) kinematic joints from the shaped template
    output_regressor: np.ndarray  # (21, N) output joints from posed vertices
    faces: np.ndarray  # (M, 3)
    lower: np.ndarray  # (45,)
    upper: np.ndarray  # (45,)

    def __post_init__(self):
        N = len(self.template)
        checks = [
            (self.template.shape == (N, 3), "template must be (N, 3)"),
            (self.shapedirs.shape == (N, 3, NUM_BETAS), "shapedirs must be (N, 3, 10)"),
            (self.parents.shape == (NUM_KIN_JOINTS,), "need 16 parents"),
            (self.weights.shape == (N, NUM_KIN_JOINTS), "weights must be (N, 16)"),
            (self.joint_regressor.shape == (NUM_KIN_JOINTS, N), "joint regressor must be (16, N)"),
            (self.output_regressor.shape == (NUM_JOINTS, N), "output regressor must be (21, N)"),
            (self.lower.shape == (NUM_ANGLES,) and self.upper.shape == (NUM_ANGLES,), "bounds must have 45 entries"),
        ]
        for ok, msg in checks:
            if not ok:
                raise InvariantViolation(msg)
        if np.max(np.abs(self.weights.sum(axis=1) - 1.0)) > 1e-6:
            raise InvariantViolation("skinning weight rows must sum to 1")
        if self.parents[0] != -1 or np.any(self.parents[1:] < 0) or np.any(self.parents[1:] >= np.arange(1, NUM_KIN_JOINTS)):
            raise InvariantViolation("kinematic tree must be rooted at joint 0 with parents preceding children")
        if np.any(self.lower > self.upper):
            raise InvariantViolation("angle bounds must satisfy lower <= upper")
        if len(self.faces) and (self.faces.min() < 0 or self.faces.max() >= N):
            raise InvariantViolation("face index out of range")
        for name in ("template", "shapedirs", "weights", "joint_regressor", "output_regressor", "lower", "upper"):
            if not np.all(np.isfinite(getattr(self, name))):
                raise InvariantViolation(f"{name} must be finite")
        for name in self.__dataclass_fields__:
            getattr(self, name).setflags(write=False)
        # subtree[k, j]: joint j is k or a descendant of k
        sub = np.eye(NUM_KIN_JOINTS, dtype=bool)
        for j in range(NUM_KIN_JOINTS - 1, 0, -1):
            sub[self.parents[j]] |= sub[j]
        object.__setattr__(self, "_subtree", sub.astype(float))

    @property
    def num_vertices(self):
        return len(self.template)

    def shaped(self, beta):
        """Shaped template vertices and kinematic joint locations."""
        v = self.template + self.shapedirs @ np.asarray(beta, dtype=float)
        return v, self.joint_regressor @ v


# ---------------------------------------------------------------- forward / derivatives

def _apply(blend, v):
    """Blended (..., N, 12) row-major [R | b] transforms applied to rest vertices (N, 3)."""
    out = blend[..., 9:] + blend[..., 0:9:3] * v[:, 0:1]
    out += blend[..., 1:9:3] * v[:, 1:2]
    out += blend[..., 2:9:3] * v[:, 2:3]
    return out


class PoseCache:
    """Intermediate quantities of a batched forward pass, reused by the derivative routines.

    With `joints_only=True` only the vertices read by the output regressor are posed;
    `vertices` then holds that subset (see `vertex_ids`).
    """

    def __init__(self, model, theta, t, beta, joints_only=False):
        theta = np.asarray(theta, dtype=float).reshape(-1, NUM_KIN_JOINTS, 3)
        t = np.asarray(t, dtype=float).reshape(-1, 3)
        F = len(theta)
        v, J = model.shaped(beta)
        reg, w = model.output_regressor, model.weights
        self.vertex_ids = None
        if joints_only:
            ids = np.flatnonzero(np.any(reg != 0, axis=0))
            self.vertex_ids = ids
            v, w, reg = v[ids], w[ids], reg[:, ids]
        R = rotvec_to_matrix(theta)  # (F, 16, 3, 3)
        W = np.empty_like(R)
        P = np.empty((F, NUM_KIN_JOINTS, 3))
        W[:, 0] = R[:, 0]
        P[:, 0] = J[0] + t
        parents = model.parents
        for j in range(1, NUM_KIN_JOINTS):
            p = parents[j]
            W[:, j] = W[:, p] @ R[:, j]
            P[:, j] = P[:, p] + W[:, p] @ (J[j] - J[p])
        b = P - (W @ J[..., None])[..., 0]
        A = np.concatenate([W.reshape(F, NUM_KIN_JOINTS, 9), b], axis=2)  # (F, 16, 12)
        self.model = model
        self.theta = theta
        self.R = R
        self.W = W
        self.P = P
        self.A = A
        self._J = J
        self._v = v
        self._w = w
        self._reg = reg
        self.vertices = _apply(w @ A, v)
        self.joints = reg @ self.vertices

    def vjp(self, grad_vertices=None, grad_joints=None):
        """Pull vertex/joint gradients back to (theta (F, 48), t (F, 3)).

        Reverse mode through the kinematic chain: per-joint affine gradients from one
        matrix product, then a backward sweep over the tree.
        """
        F = len(self.theta)
        g = np.zeros_like(self.vertices)
        if grad_vertices is not None:
            g = g + grad_vertices
        if grad_joints is not None:
            g = g + self._reg.T @ grad_joints
        N = len(self._v)
        vh = np.concatenate([self._v, np.ones((N, 1))], axis=1)
        G = self._w.T @ (g[:, :, :, None] * vh[None, :, None, :]).reshape(F, N, 12)
        G = G.reshape(F, NUM_KIN_JOINTS, 3, 4)
        J, W, R, parents = self._J, self.W, self.R, self.model.parents
        gP = G[..., 3].copy()
        gW = G[..., :3] - gP[..., :, None] * J[None, :, None, :]
        gR = np.empty_like(gW)
        for j in range(NUM_KIN_JOINTS - 1, 0, -1):
            p = parents[j]
            gR[:, j] = np.swapaxes(W[:, p], -1, -2) @ gW[:, j]
            gW[:, p] += gW[:, j] @ np.swapaxes(R[:, j], -1, -2) + gP[:, j, :, None] * (J[j] - J[p])[None, None, :]
            gP[:, p] += gP[:, j]
        gR[:, 0] = gW[:, 0]
        S = gR @ np.swapaxes(R, -1, -2)
        axial = np.stack([S[..., 2, 1] - S[..., 1, 2], S[..., 0, 2] - S[..., 2, 0], S[..., 1, 0] - S[..., 0, 1]], axis=-1)
        g_theta = (np.swapaxes(left_jacobian(self.theta), -1, -2) @ axial[..., None])[..., 0]
        return g_theta.reshape(F, 48), gP[:, 0]

    def lever_arms(self):
        """u_ik = sum over j in subtree(k) of w_ij (y_ij - P_k), shape (F, 16, N, 3)."""
        F, N = self.vertices.shape[:2]
        ws = (self.model._subtree[:, None, :] * self._w[None]).reshape(NUM_KIN_JOINTS * N, NUM_KIN_JOINTS)
        Y = _apply((ws @ self.A).reshape(F, NUM_KIN_JOINTS, N, 12), self._v)
        c = ws.sum(axis=1).reshape(NUM_KIN_JOINTS, N)
        return Y - c[None, :, :, None] * self.P[:, :, None, :]

    def vertex_jacobian(self):
        """d vertices / d theta, shape (F, N, 3, 48); d vertices / d t is the identity."""
        F, N = self.vertices.shape[:2]
        Wp = np.empty_like(self.W)
        Wp[:, 0] = np.eye(3)
        Wp[:, 1:] = self.W[:, self.model.parents[1:]]
        M = Wp @ left_jacobian(self.theta)
        blocks = -skew(self.lever_arms()) @ M[:, :, None, :, :]  # (F, 16, N, 3, 3)
        return blocks.transpose(0, 2, 3, 1, 4).reshape(F, N, 3, 48)


def forward_batch(model, theta, t, beta):
    """Batched forward pass; theta (F, 48), t (F, 3). Returns a PoseCache."""
    return PoseCache(model, theta, t, beta)


def forward(model, params):
    c = PoseCache(model, params.theta[None], params.t[None], params.beta)
    return HandState(c.joints[0], c.vertices[0])


def forward_jacobian(model, params):
    """Analytic Jacobians with beta fixed.

    Returns dict with dJ_dtheta (21, 3, 48), dJ_dt (21, 3, 3), dV_dtheta (N, 3, 48), dV_dt (N, 3, 3).
    """
    c = PoseCache(model, params.theta[None], params.t[None], params.beta)
    dV = c.vertex_jacobian()[0]
    dJ = np.einsum("kn,nab->kab", model.output_regressor, dV)
    N = model.num_vertices
    return {
        "dJ_dtheta": dJ,
        "dJ_dt": np.broadcast_to(np.eye(3), (NUM_JOINTS, 3, 3)).copy(),
        "dV_dtheta": dV,
        "dV_dt": np.broadcast_to(np.eye(3), (N, 3, 3)).copy(),
    }


# ---------------------------------------------------------------- synthetic model

_BONES = {  # rest-pose joint positions (m), right hand, palm facing -z, fingers along +y
    "index": [(0.025, 0.090, 0.0), (0.027, 0.128, 0.0), (0.028, 0.152, 0.0), (0.029, 0.172, 0.0)],
    "middle": [(0.005, 0.093, 0.0), (0.005, 0.135, 0.0), (0.005, 0.162, 0.0), (0.005, 0.184, 0.0)],
    "pinky": [(-0.033, 0.080, 0.0), (-0.036, 0.108, 0.0), (-0.038, 0.126, 0.0), (-0.039, 0.142, 0.0)],
    "ring": [(-0.015, 0.089, 0.0), (-0.017, 0.127, 0.0), (-0.018, 0.152, 0.0), (-0.019, 0.172, 0.0)],
    "thumb": [(0.022, 0.020, -0.008), (0.045, 0.045, -0.012), (0.062, 0.068, -0.014), (0.075, 0.088, -0.015)],
}
_FINGER_RADIUS = {"index": 0.0085, "middle": 0.0088, "pinky": 0.0075, "ring": 0.0082, "thumb": 0.0095}


def _frame(direction):
    d = direction / np.linalg.norm(direction)
    ref = np.array([0.0, 0.0, 1.0]) if abs(d[2]) < 0.9 else np.array([1.0, 0.0, 0.0])
    a = np.cross(d, ref)
    a /= np.linalg.norm(a)
    return d, a, np.cross(d, a)


def _tube_faces(rings, k, flip=False):
    faces = []
    for r0, r1 in zip(rings[:-1], rings[1:]):
        for i in range(k):
            a, b, c, d = r0 + i, r0 + (i + 1) % k, r1 + (i + 1) % k, r1 + i
            faces += [(a, b, c), (a, c, d)]
    if flip:
        faces = [(a, c, b) for a, b, c in faces]
    return faces


def _cap_faces(center, ring, k, flip=False):
    faces = [(center, ring + (i + 1) % k, ring + i) for i in range(k)]
    if flip:
        faces = [(a, c, b) for a, b, c in faces]
    return faces


def _orient_outward(V, faces, groups):
    """Flip each closed component so its signed volume is positive."""
    F = np.array(faces)
    for idx in groups:
        sel = np.isin(F[:, 0], idx)
        a, b, c = V[F[sel, 0]], V[F[sel, 1]], V[F[sel, 2]]
        if np.sum(np.einsum("ij,ij->i", a, np.cross(b, c))) < 0:
            F[sel] = F[sel][:, [0, 2, 1]]
    return F


def synthetic_model(vertex_count=778, seed=0):
    """Procedural capsule-limb hand with at least `vertex_count` vertices.

    A rigid palm tube and five finger tubes, each closed by caps; finger rings are
    skinned to their bone and blended with the neighboring bone near joints.
    Arrays are rounded to float32 so the binary format round-trips exactly.
    """
    if vertex_count < 100:
        raise InvariantViolation("vertex_count must be >= 100")
    for k, m, n_p in [(k, m, n_p) for k in (4, 6, 8, 10, 12, 16) for m in (1, 2, 3, 4, 6, 8) for n_p in (2, 4, 6, 10, 15, 24)]:
        total = n_p * 2 * k + 2 + 5 * ((3 * m + 1) * k + 2)
        if total >= vertex_count:
            break
    k_p = 2 * k
    verts, weights, faces = [], [], []
    tips, joint_rings, groups = {}, {}, []

    def add_ring(center, axes, radii, kk, w):
        start = len(verts)
        _, a, b = axes
        for i in range(kk):
            ang = 2 * np.pi * i / kk
            verts.append(center + radii[0] * np.cos(ang) * a + radii[1] * np.sin(ang) * b)
            weights.append(w)
        return start

    def one_hot(*pairs):
        w = np.zeros(NUM_KIN_JOINTS)
        for j, x in pairs:
            w[j] += x
        return w

    # palm: elliptical tube from the wrist toward the finger bases, rigid to the wrist
    palm_axes = (np.array([0.0, 1.0, 0.0]), np.array([1.0, 0.0, 0.0]), np.array([0.0, 0.0, 1.0]))
    start_idx = len(verts)
    rings = []
    for s in range(n_p):
        y = 0.075 * s / (n_p - 1)
        width = 0.030 + 0.012 * s / (n_p - 1)
        rings.append(add_ring(np.array([-0.004, y, 0.0]), palm_axes, (width, 0.012), k_p, one_hot((0, 1.0))))
    joint_rings[0] = rings[0]
    c0 = len(verts)
    verts.append(np.array([-0.004, 0.0, 0.0]))
    weights.append(one_hot((0, 1.0)))
    c1 = len(verts)
    verts.append(np.array([-0.004, 0.075, 0.0]))
    weights.append(one_hot((0, 1.0)))
    faces += _tube_faces(rings, k_p) + _cap_faces(c0, rings[0], k_p) + _cap_faces(c1, rings[-1], k_p, flip=True)
    groups.append(np.arange(start_idx, len(verts)))

    for f, name in enumerate(FINGERS):
        pts = np.array(_BONES[name])
        joints = [1 + 3 * f, 2 + 3 * f, 3 + 3 * f]
        radius = _FINGER_RADIUS[name]
        start_idx = len(verts)
        rings = []
        for bone in range(3):
            j = joints[bone]
            parent = MANO_PARENTS[j]
            child = joints[bone + 1] if bone < 2 else None
            axes = _frame(pts[bone + 1] - pts[bone])
            for s in range(m):
                frac = s / m
                w_prev = max(0.0, 0.5 - frac / 0.4)
                w_next = max(0.0, 0.5 - (1.0 - frac) / 0.4) if child is not None else 0.0
                w = one_hot((parent, w_prev), (j, 1.0 - w_prev - w_next))
                if child is not None:
                    w += one_hot((child, w_next))
                r = radius * (1.0 - 0.12 * (bone + frac) / 3)
                idx = add_ring(pts[bone] + frac * (pts[bone + 1] - pts[bone]), axes, (r, 0.85 * r), k, w)
                if s == 0:
                    joint_rings[j] = idx
                rings.append(idx)
        axes = _frame(pts[3] - pts[2])
        r = radius * 0.88 * 0.7
        rings.append(add_ring(pts[2] + 0.85 * (pts[3] - pts[2]), axes, (r, 0.85 * r), k, one_hot((joints[2], 1.0))))
        base = len(verts)
        verts.append(pts[0] - 0.002 * _frame(pts[1] - pts[0])[0])
        weights.append(one_hot((MANO_PARENTS[joints[0]], 0.5), (joints[0], 0.5)))
        tip = len(verts)
        verts.append(pts[3])
        weights.append(one_hot((joints[2], 1.0)))
        tips[name] = tip
        faces += _tube_faces(rings, k) + _cap_faces(base, rings[0], k) + _cap_faces(tip, rings[-1], k, flip=True)
        groups.append(np.arange(start_idx, len(verts)))

    V = np.array(verts)
    N = len(V)
    F = _orient_outward(V, faces, groups)
    W = np.array(weights)
    W /= W.sum(axis=1, keepdims=True)

    kin_reg = np.zeros((NUM_KIN_JOINTS, N))
    for j in range(NUM_KIN_JOINTS):
        kk = k_p if j == 0 else k
        kin_reg[j, joint_rings[j]:joint_rings[j] + kk] = 1.0 / kk
    out_reg = np.zeros((NUM_JOINTS, N))
    out_reg[:NUM_KIN_JOINTS] = kin_reg
    for f, name in enumerate(FINGERS):
        out_reg[NUM_KIN_JOINTS + f, tips[name]] = 1.0

    # shape space: global scale, finger length, palm width, thickness, then smooth random fields
    rng = np.random.default_rng(seed)
    S = np.zeros((N, 3, NUM_BETAS))
    S[:, :, 0] = 0.05 * V
    finger_mask = np.ones(N, dtype=bool)
    finger_mask[groups[0]] = False
    finger_base = np.zeros_like(V)
    for f, name in enumerate(FINGERS):
        finger_base[groups[f + 1]] = _BONES[name][0]
    S[finger_mask, :, 1] = 0.06 * (V - finger_base)[finger_mask]
    S[:, 0, 2] = 0.06 * V[:, 0]
    S[:, 2, 3] = 0.08 * V[:, 2]
    for b in range(4, NUM_BETAS):
        freq = rng.normal(size=(3, 3)) * 20.0
        phase = rng.uniform(0, 2 * np.pi, size=3)
        S[:, :, b] = 0.0015 * np.sin(V @ freq + phase)

    f32 = lambda a: np.asarray(a, dtype=np.float32).astype(np.float64)
    half = np.pi / 2
    return HandModel(
        template=f32(V), shapedirs=f32(S), parents=np.array(MANO_PARENTS, dtype=np.int64),
        weights=_dyadic_rows(W), joint_regressor=_dyadic_rows(kin_reg), output_regressor=_dyadic_rows(out_reg),
        faces=F.astype(np.int64),
        lower=f32(np.full(NUM_ANGLES, -half)), upper=f32(np.full(NUM_ANGLES, half)))


def _dyadic_rows(M, bits=20):
    """Round rows of non-negative weights to multiples of 2**-bits, each summing to exactly 1.

    Such values are exact in float32 and their sums are exact in float64, so the rest pose
    and pure translations reproduce the template without rounding drift.
    """
    q = np.round(M * 2.0 ** bits)
    dom = np.argmax(q, axis=1)
    q[np.arange(len(q)), dom] += 2.0 ** bits - q.sum(axis=1)
    return q / 2.0 ** bits


def mirrored(model):
    """Reflect a hand model through the x = 0 plane (right hand <-> left hand)."""
    flip = np.array([-1.0, 1.0, 1.0])
    return HandModel(
        template=model.template * flip, shapedirs=model.shapedirs * flip[None, :, None],
        parents=np.array(model.parents), weights=np.array(model.weights),
        joint_regressor=np.array(model.joint_regressor), output_regressor=np.array(model.output_regressor),
        faces=np.array(model.faces)[:, ::-1], lower=np.array(model.lower), upper=np.array(model.upper))


def from_mano_dict(d, lower=None, upper=None):
    """Build a HandModel from MANO-style arrays.

    Expects v_template (778, 3), shapedirs (778, 3, >=10), J_regressor (16, 778),
    weights (778, 16), kintree_table (2, 16) and f. Pose blendshapes are ignored.
    """
    V = np.asarray(d["v_template"], dtype=float)
    Jreg = d["J_regressor"]
    Jreg = np.asarray(Jreg.toarray() if hasattr(Jreg, "toarray") else Jreg, dtype=float)
    kin = np.asarray(d["kintree_table"])[0].astype(np.int64)
    kin[0] = -1
    out_reg = np.zeros((NUM_JOINTS, len(V)))
    out_reg[:NUM_KIN_JOINTS] = Jreg
    for f, vid in enumerate(MANO_TIP_VERTICES):
        out_reg[NUM_KIN_JOINTS + f, vid] = 1.0
    half = np.pi / 2
    return HandModel(
        template=V, shapedirs=np.asarray(d["shapedirs"], dtype=float)[:, :, :NUM_BETAS], parents=kin,
        weights=np.asarray(d["weights"], dtype=float), joint_regressor=Jreg, output_regressor=out_reg,
        faces=np.asarray(d["f"], dtype=np.int64),
        lower=np.full(NUM_ANGLES, -half) if lower is None else np.asarray(lower, dtype=float),
        upper=np.full(NUM_ANGLES, half) if upper is None else np.asarray(upper, dtype=float))


# ---------------------------------------------------------------- binary format

_ARRAYS = {"template": "<f4", "shapedirs": "<f4", "parents": "<i4", "weights": "<f4",
           "joint_regressor": "<f4", "output_regressor": "<f4", "faces": "<i4",
           "lower": "<f4", "upper": "<f4"}


def save_model(model, path):
    """MAGIC, uint64 header length, JSON header, then little-endian array blobs."""
    entries, blobs, offset = {}, [], 0
    for name, dtype in _ARRAYS.items():
        arr = np.ascontiguousarray(getattr(model, name), dtype=dtype)
        data = arr.tobytes()
        entries[name] = {"dtype": dtype, "shape": list(arr.shape), "offset": offset, "nbytes": len(data)}
        blobs.append(data)
        offset += len(data)
    header = json.dumps({"format": "hoannot-hand-model", "version": 1, "arrays": entries}, sort_keys=True).encode()
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<Q", len(header)))
        fh.write(header)
        for b in blobs:
            fh.write(b)


def load_model(path):
    raw = Path(path).read_bytes()
    if raw[:len(MAGIC)] != MAGIC:
        raise ParseError(f"{path}: bad magic, expected {MAGIC!r}")
    try:
        (hlen,) = struct.unpack_from("<Q", raw, len(MAGIC))
        start = len(MAGIC) + 8
        header = json.loads(raw[start:start + hlen])
        body = raw[start + hlen:]
        arrays = {}
        for name in _ARRAYS:
            e = header["arrays"][name]
            if e["offset"] + e["nbytes"] > len(body):
                raise ParseError(f"{path}: array {name!r} truncated")
            a = np.frombuffer(body, dtype=e["dtype"], count=int(np.prod(e["shape"])), offset=e["offset"])
            a = a.reshape(e["shape"])
            arrays[name] = a.astype(np.int64) if a.dtype.kind == "i" else a.astype(np.float64)
    except (struct.error, json.JSONDecodeError, KeyError, ValueError) as exc:
        raise ParseError(f"{path}: corrupt model file ({exc!r})") from exc
    return HandModel(**arrays)
