"""Synthetic capture sessions with known ground truth.

A scene is a ring of cameras, two hands (right holding a tool, left resting over a
target), marker rigs on both objects and a keyframed motion. `generate` produces clean
and corrupted observations; `write_inputs` emits the pipeline's input files;
`score_pipeline` compares pipeline outputs with the truth.
"""

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.spatial import cKDTree

from . import metrics
from .calibration import CalibrationObservation, TimestampStream, save_observations, save_streams
from .errors import InvalidSpec, ShapeMismatch
from .fusion import Keypoints2D, keypoint_records
from .geometry.camera import CameraModel, save_cameras
from .geometry.mesh import TriMesh, blob, save_mesh
from .geometry.rotations import random_rotation, rotvec_to_matrix
from .geometry.transform import RigidTransform
from .hand_model import PoseCache, mirrored, save_model, synthetic_model
from .registration import MarkerRig, rig_record

HANDS = ("left", "right")
HAND_OBJECT = {"right": "tool", "left": "target"}

# independent random streams, keyed by purpose
STREAM_MOTION, STREAM_PLACEMENT, STREAM_KEYPOINTS, STREAM_OUTLIERS, STREAM_MARKERS, STREAM_INIT, STREAM_CALIB = range(7)


def _merge(base, over):
    out = dict(base)
    for k, v in over.items():
        out[k] = _merge(base[k], v) if isinstance(v, dict) and isinstance(base.get(k), dict) else v
    return out


DEFAULT_SPEC = {
    "seed": 0,
    "frames": 50,
    "fps": 30.0,
    "mocap_rate": 120.0,
    "mocap_offset_ms": 0.0,
    "cameras": {"count": 12, "radius": 1.2, "heights": [0.3, 0.9], "fx": 1000.0, "fy": 1000.0,
                "width": 1280, "height": 1024},
    "hand": {"vertex_count": 778, "beta_scale": 0.5},
    "objects": {
        "tool": {"shape": "blob", "radius": 0.03, "subdivisions": 5, "seed": 11, "amplitude": 0.15,
                 "axes": [1.0, 0.8, 0.7], "gap": 0.0015},
        "target": {"shape": "blob", "radius": 0.07, "subdivisions": 5, "seed": 12, "amplitude": 0.1,
                   "axes": [1.0, 1.0, 0.35], "gap": 0.0015},
    },
    "markers": {"count": 14, "tracked": 4, "radius": 0.004},
    "motion": {"keyframes": 4, "finger_extension": [-0.1, 0.5], "finger_wiggle": 0.15,
               "wrist_rotation": 0.3, "translation": 0.03},
    "noise": {"keypoint_sigma": 0.0, "outlier_rate": 0.0, "marker_jitter_mm": 0.0,
              "init_translation_mm": 5.0, "init_rotation_deg": 5.0, "calibration_sigma": 0.0},
    "calibration_points": 12,
}


@dataclass
class SceneSpec:
    data: dict

    def __post_init__(self):
        d = _merge(DEFAULT_SPEC, self.data)
        self.data = d
        if d["cameras"]["count"] < 2:
            raise InvalidSpec("camera count must be >= 2")
        if d["frames"] < 1:
            raise InvalidSpec("frames must be >= 1")
        for k in ("keypoint_sigma", "outlier_rate", "marker_jitter_mm", "init_translation_mm",
                  "init_rotation_deg", "calibration_sigma"):
            if not d["noise"][k] >= 0:
                raise InvalidSpec(f"noise.{k} must be >= 0")
        if d["noise"]["outlier_rate"] > 1:
            raise InvalidSpec("noise.outlier_rate must be <= 1")
        if d["fps"] <= 0 or d["mocap_rate"] <= 0:
            raise InvalidSpec("rates must be > 0")
        m = d["markers"]
        if not 3 <= m["tracked"] <= m["count"]:
            raise InvalidSpec("need 3 <= markers.tracked <= markers.count")

    def __getitem__(self, key):
        return self.data[key]

    @property
    def seed(self):
        return int(self.data["seed"])

    def rng(self, stream):
        return np.random.default_rng([self.seed, stream])

    @classmethod
    def from_json(cls, path):
        try:
            return cls(json.loads(Path(path).read_text()))
        except json.JSONDecodeError as exc:
            raise InvalidSpec(f"{path}: invalid JSON ({exc.msg} at line {exc.lineno})") from exc


@dataclass
class GroundTruthBundle:
    spec: SceneSpec
    cameras: list
    models: dict  # hand -> HandModel
    betas: dict  # hand -> (10,)
    theta: dict  # hand -> (F, 48)
    trans: dict  # hand -> (F, 3)
    joints: dict  # hand -> (F, 21, 3)
    meshes: dict  # object -> TriMesh (model coordinates)
    object_poses: dict  # object -> list of RigidTransform at camera frames (model -> world)
    rigs: dict  # object -> MarkerRig
    rig_to_object: dict  # object -> true RigidTransform, rig -> model coordinates
    rig_init: dict  # object -> perturbed initial guess of rig_to_object
    clean_keypoints: dict  # hand -> [Keypoints2D]
    keypoints: dict  # hand -> [Keypoints2D], corrupted
    outlier_mask: dict  # hand -> (F, C, 21) bool
    camera_times: np.ndarray  # ms
    mocap_times: np.ndarray  # ms
    clean_markers: dict  # object -> (M, K, 3) world positions at mocap samples
    markers: dict  # object -> (M, K, 3), jittered
    calibration: dict = field(default_factory=dict)  # camera id -> [CalibrationObservation]

    @property
    def frames(self):
        return int(self.spec["frames"])


def camera_ring(count=12, radius=1.2, heights=(0.3, 0.9), fx=1000.0, fy=1000.0, width=1280, height=1024,
                target=(0.0, 0.0, 0.0)):
    """Cameras spread over rings at the given heights, all looking at `target` (z up)."""
    target = np.asarray(target, dtype=float)
    per = [count // len(heights) + (1 if i < count % len(heights) else 0) for i in range(len(heights))]
    cams = []
    for ring, (n, h) in enumerate(zip(per, heights)):
        for k in range(n):
            a = 2 * np.pi * (k + 0.5 * ring) / n
            c = np.array([radius * np.cos(a), radius * np.sin(a), h])
            z = target - c
            z /= np.linalg.norm(z)
            x = np.cross(z, [0.0, 0.0, 1.0])
            x /= np.linalg.norm(x)
            R = np.stack([x, np.cross(z, x), z])
            cams.append(CameraModel(fx, fy, width / 2.0, height / 2.0, RigidTransform(R, -R @ c),
                                    width=width, height=height, name=f"cam{len(cams):02d}"))
    return cams


def _object_mesh(d):
    if "mesh" in d:
        from .geometry.mesh import load_mesh
        return load_mesh(d["mesh"])
    if d.get("shape", "blob") != "blob":
        raise InvalidSpec(f"unknown object shape {d.get('shape')!r}")
    return blob(d["radius"], d["subdivisions"], d["seed"], d["amplitude"], tuple(d["axes"]))


def _gap_offset(hand_vertices, mesh, direction, gap):
    """Smallest shift along `direction` that keeps every mesh vertex at least `gap` from the hand vertices."""
    tree = cKDTree(hand_vertices)  # distances only, so no index tie-breaking needed
    lo, hi = 0.0, 0.3
    for _ in range(60):
        mid = 0.5 * (lo + hi)
        d, _ = tree.query(mesh.vertices + mid * direction)
        if d.min() < gap:
            lo = mid
        else:
            hi = mid
    return hi


def _ease(u):
    return 3 * u ** 2 - 2 * u ** 3


def _interpolate(keys, times):
    """Cubic-eased interpolation of keyframe rows `keys` (K, D) at fractional times in [0, K - 1]."""
    times = np.clip(times, 0, len(keys) - 1)
    i = np.minimum(np.floor(times).astype(int), len(keys) - 2) if len(keys) > 1 else np.zeros(len(times), int)
    if len(keys) == 1:
        return np.repeat(keys, len(times), axis=0)
    u = _ease(times - i)[:, None]
    return keys[i] * (1 - u) + keys[i + 1] * u


def _wrist_frame(model, beta, theta, t):
    """Rigid transform carrying rest-pose hand coordinates with the global rotation and translation."""
    J0 = model.shaped(beta)[1][0]
    R = rotvec_to_matrix(theta[:3])
    return RigidTransform(R, J0 + t - R @ J0)


def generate(spec):
    """Build a GroundTruthBundle; deterministic given spec (including its seed)."""
    if not isinstance(spec, SceneSpec):
        spec = SceneSpec(spec)
    F = spec["frames"]
    fps = float(spec["fps"])
    cams = camera_ring(**spec["cameras"])
    right = synthetic_model(spec["hand"]["vertex_count"])
    models = {"right": right, "left": mirrored(right)}
    place = spec.rng(STREAM_PLACEMENT)
    betas = {h: place.normal(size=10) * spec["hand"]["beta_scale"] for h in HANDS}
    base_t = {"right": np.array([0.06, -0.09, 0.0]), "left": np.array([-0.12, -0.09, 0.0])}

    # motion keyframes; the tool rides in the right palm, the target lies under the left hand
    mot = spec["motion"]
    rng = spec.rng(STREAM_MOTION)
    K = max(int(mot["keyframes"]), 1)
    theta, trans = {}, {}
    cam_t = np.arange(F) / fps * 1000.0
    M = int(np.floor((F - 1) / fps * spec["mocap_rate"])) + 1
    mocap_t = np.arange(M) / spec["mocap_rate"] * 1000.0 + spec["mocap_offset_ms"]
    key_time = lambda ms: ms / max((F - 1) / fps * 1000.0, 1e-9) * (K - 1)
    lo, hi = mot["finger_extension"]
    hand_keys = {}
    for h in HANDS:
        keys = np.zeros((K, 51))
        for k in range(K):
            ang = rng.uniform(-mot["finger_wiggle"], mot["finger_wiggle"], size=(15, 3))
            ang[:, 0] = rng.uniform(lo, hi, size=15)
            keys[k, 3:48] = ang.reshape(-1)
            if h == "right":
                axis = rng.normal(size=3)
                keys[k, :3] = axis / np.linalg.norm(axis) * rng.uniform(0, mot["wrist_rotation"])
                keys[k, 48:] = base_t[h] + rng.uniform(-1, 1, size=3) * mot["translation"]
            else:
                keys[k, 2] = rng.uniform(-1, 1) * mot["wrist_rotation"]
                keys[k, 48:50] = base_t[h][:2] + rng.uniform(-1, 1, size=2) * mot["translation"]
        hand_keys[h] = keys
        x = _interpolate(keys, key_time(cam_t))
        theta[h], trans[h] = x[:, :48], x[:, 48:]
    joints = {h: PoseCache(models[h], theta[h], trans[h], betas[h]).joints for h in HANDS}

    meshes, object_poses, rigs, rig_true, rig_init = {}, {}, {}, {}, {}
    clean_markers, markers = {}, {}
    mk = spec["markers"]
    mrng = spec.rng(STREAM_MARKERS)
    irng = spec.rng(STREAM_INIT)
    for h in ("right", "left"):
        name = HAND_OBJECT[h]
        od = spec["objects"][name]
        mesh = _object_mesh(od)
        meshes[name] = mesh
        rest = PoseCache(models[h], np.zeros((1, 48)), np.zeros((1, 3)), betas[h]).vertices[0]
        rest = rest[models[h].weights[:, 0] > 0.99]  # palm vertices, rigid to the wrist
        palm = rest[np.argmin(rest[:, 2])]  # lowest palm point, palm faces -z
        center = np.array([palm[0], palm[1] + 0.02 * (h == "right"), 0.0])
        down = np.array([0.0, 0.0, -1.0])
        # gap against every posed vertex of the sequence, seen from the frame the object is attached to
        V = PoseCache(models[h], theta[h], trans[h], betas[h]).vertices
        if h == "right":
            frames = [_wrist_frame(models[h], betas[h], theta[h][f], trans[h][f]) for f in range(F)]
        else:
            frames = [_wrist_frame(models[h], betas[h], hand_keys[h][0, :48], hand_keys[h][0, 48:])] * F
        swept = np.concatenate([fr.inverse().apply(V[f]) for f, fr in enumerate(frames)])
        off = _gap_offset(swept, mesh.translated(center), down, od["gap"])
        local = RigidTransform(np.eye(3), center + off * down)  # object model -> rest hand coordinates

        def pose_at(ms, h=h, local=local):
            x = _interpolate(hand_keys[h], key_time(np.atleast_1d(ms)))
            if h == "right":
                return [_wrist_frame(models[h], betas[h], xi[:48], xi[48:]) @ local for xi in x]
            # target stays where the left hand starts
            first = _wrist_frame(models[h], betas[h], hand_keys[h][0, :48], hand_keys[h][0, 48:])
            return [first @ local for _ in x]

        object_poses[name] = pose_at(cam_t)
        # rig: markers on the surface, rig frame unknown to the pipeline
        vids = mrng.choice(len(mesh.vertices), mk["count"], replace=False)
        T = RigidTransform(random_rotation(mrng), mrng.normal(size=3) * 0.05)
        rig = MarkerRig(T.inverse().apply(mesh.vertices[vids]), tuple(range(mk["tracked"])), mk["radius"], name)
        rigs[name], rig_true[name] = rig, T
        ax = irng.normal(size=3)
        dt = irng.normal(size=3)
        nz = spec["noise"]
        rig_init[name] = RigidTransform.from_rotvec(
            ax / np.linalg.norm(ax) * np.deg2rad(nz["init_rotation_deg"]),
            dt / np.linalg.norm(dt) * nz["init_translation_mm"] * 1e-3) @ T
        local_markers = mesh.vertices[vids]
        clean = np.stack([p.apply(local_markers) for p in pose_at(mocap_t)])
        clean_markers[name] = clean
        markers[name] = clean + mrng.normal(size=clean.shape) * spec["noise"]["marker_jitter_mm"] * 1e-3

    # keypoints: projections, Gaussian noise, a fraction replaced by uniform pixels
    krng = spec.rng(STREAM_KEYPOINTS)
    orng = spec.rng(STREAM_OUTLIERS)
    ids = [c.name for c in cams]
    size = np.array([[c.width or 2 * c.cx, c.height or 2 * c.cy] for c in cams], dtype=float)
    clean_kp, noisy_kp, outlier_mask = {}, {}, {}
    for h in HANDS:
        clean_kp[h], noisy_kp[h] = [], []
        masks = []
        for f in range(F):
            px = np.stack([c.project(joints[h][f]) for c in cams])
            noise = krng.normal(size=px.shape) * spec["noise"]["keypoint_sigma"]
            out = orng.random(px.shape[:2]) < spec["noise"]["outlier_rate"]
            uniform = orng.random(px.shape) * size[:, None, :]
            bad = np.where(out[..., None], uniform, px + noise)
            clean_kp[h].append(Keypoints2D.from_pixels(ids, px))
            noisy_kp[h].append(Keypoints2D.from_pixels(ids, bad))
            masks.append(out)
        outlier_mask[h] = np.array(masks)

    # extrinsic calibration wand observations in a box around the work volume
    crng = spec.rng(STREAM_CALIB)
    calib = {}
    for c in cams:
        pts = crng.uniform([-0.3, -0.3, -0.1], [0.3, 0.3, 0.3], size=(spec["calibration_points"], 3))
        px = c.project(pts) + crng.normal(size=(len(pts), 2)) * spec["noise"]["calibration_sigma"]
        calib[c.name] = [CalibrationObservation(tuple(p), tuple(q)) for p, q in zip(pts.tolist(), px.tolist())]

    return GroundTruthBundle(spec, cams, models, betas, theta, trans, joints, meshes, object_poses, rigs, rig_true,
                             rig_init, clean_kp, noisy_kp, outlier_mask, cam_t, mocap_t, clean_markers, markers, calib)


# ---------------------------------------------------------------- files

def write_inputs(bundle, outdir, clean=False):
    """Write pipeline inputs and ground truth under `outdir`; returns the config dict (also saved)."""
    out = Path(outdir)
    (out / "meshes").mkdir(parents=True, exist_ok=True)
    F = bundle.frames
    save_cameras(bundle.cameras, out / "cameras.json")
    intr = [CameraModel(c.fx, c.fy, c.cx, c.cy, RigidTransform.identity(), c.k1, c.k2, c.width, c.height, c.name)
            for c in bundle.cameras]
    save_cameras(intr, out / "intrinsics.json")
    save_observations(out / "calibration.jsonl", bundle.calibration)
    kps = bundle.clean_keypoints if clean else bundle.keypoints
    with open(out / "keypoints.jsonl", "w") as fh:
        for f in range(F):
            for h in HANDS:
                for rec in keypoint_records(f, h, kps[h][f]):
                    fh.write(json.dumps(rec) + "\n")
    markers = bundle.clean_markers if clean else bundle.markers
    with open(out / "markers.jsonl", "w") as fh:
        for name in sorted(markers):
            rig = bundle.rigs[name]
            for m, ms in enumerate(bundle.mocap_times):
                recs = [{"id": int(k), "x": float(x), "y": float(y), "z": float(z), "visible": True}
                        for k, (x, y, z) in zip(rig.tracked, markers[name][m][list(rig.tracked)])]
                fh.write(json.dumps({"frame": m, "object": name, "timestamp": float(ms), "markers": recs}) + "\n")
    save_streams(out / "streams.jsonl", [TimestampStream("cameras", bundle.camera_times),
                                         TimestampStream("mocap", bundle.mocap_times)])
    objects = {}
    for name, mesh in sorted(bundle.meshes.items()):
        save_mesh(mesh, out / "meshes" / f"{name}.ply")
        objects[name] = rig_record(bundle.rigs[name], bundle.rig_init[name], f"meshes/{name}.ply")
    (out / "rigs.json").write_text(json.dumps({"objects": objects}, indent=1, sort_keys=True) + "\n")
    for h in HANDS:
        save_model(bundle.models[h], out / f"hand_{h}.bin")
    write_truth(bundle, out / "groundtruth.json")
    config = {
        "paths": {
            "intrinsics": "intrinsics.json", "calibration": "calibration.jsonl", "cameras": "cameras.json",
            "keypoints": "keypoints.jsonl", "markers": "markers.jsonl", "streams": "streams.jsonl",
            "rigs": "rigs.json", "groundtruth": "groundtruth.json", "output": "out",
            "models": {h: f"hand_{h}.bin" for h in HANDS},
        },
        "hands": {h: {"beta": bundle.betas[h].tolist(), "object": HAND_OBJECT[h]} for h in HANDS},
        "sync": {"reference": "cameras", "other": "mocap"},
    }
    (out / "config.json").write_text(json.dumps(config, indent=1, sort_keys=True) + "\n")
    return config


def write_truth(bundle, path):
    doc = {
        "frames": bundle.frames,
        "hands": {h: {"theta": bundle.theta[h].tolist(), "t": bundle.trans[h].tolist(),
                      "beta": bundle.betas[h].tolist(), "joints": bundle.joints[h].tolist()} for h in HANDS},
        "objects": {n: {"poses": [p.to_dict() for p in ps], "rig_to_object": bundle.rig_to_object[n].to_dict()}
                    for n, ps in sorted(bundle.object_poses.items())},
        "pairs": HAND_OBJECT,
    }
    Path(path).write_text(json.dumps(doc, sort_keys=True) + "\n")


@dataclass
class Truth:
    """What scoring needs: per-hand joints and params, per-object poses."""

    joints: dict
    theta: dict
    trans: dict
    betas: dict
    object_poses: dict
    pairs: dict

    @classmethod
    def from_bundle(cls, b):
        return cls(b.joints, b.theta, b.trans, b.betas, b.object_poses, dict(HAND_OBJECT))

    @classmethod
    def load(cls, path):
        d = json.loads(Path(path).read_text())
        hands = d["hands"]
        return cls({h: np.array(v["joints"]) for h, v in hands.items()},
                   {h: np.array(v["theta"]) for h, v in hands.items()},
                   {h: np.array(v["t"]) for h, v in hands.items()},
                   {h: np.array(v["beta"]) for h, v in hands.items()},
                   {n: [RigidTransform.from_dict(p) for p in v["poses"]] for n, v in d["objects"].items()},
                   dict(d["pairs"]))


def score_pipeline(truth, models, meshes, hand_params=None, object_poses=None, mesh_stride=1, voxel=0.001):
    """Metric report of pipeline outputs against ground truth.

    hand_params: {hand: (theta (F, 48), t (F, 3))}; object_poses: {object: [RigidTransform]}.
    Contact and collision metrics use every `mesh_stride`-th frame.
    """
    if isinstance(truth, GroundTruthBundle):
        truth = Truth.from_bundle(truth)
    report = {"hands": {}, "objects": {}}
    hand_params = hand_params or {}
    object_poses = object_poses or {}
    hand_meshes = {}
    for h, (theta, t) in sorted(hand_params.items()):
        theta = np.asarray(theta, dtype=float)
        t = np.asarray(t, dtype=float)
        gt = truth.joints[h]
        if theta.shape != (len(gt), 48) or t.shape != (len(gt), 3):
            raise ShapeMismatch(f"{h}: expected {len(gt)} frames of hand parameters")
        cache = PoseCache(models[h], theta, t, truth.betas[h])
        r = {"mpjpe_mm": metrics.mpjpe(cache.joints, gt), "pa_mpjpe_mm": metrics.pa_mpjpe(cache.joints, gt)}
        if len(gt) >= 3:
            r["acceleration_error"] = metrics.acceleration_error(cache.joints, gt)
        report["hands"][h] = r
        hand_meshes[h] = cache.vertices
    for name, poses in sorted(object_poses.items()):
        gt = truth.object_poses[name]
        if len(poses) != len(gt):
            raise ShapeMismatch(f"{name}: expected {len(gt)} poses, got {len(poses)}")
        report["objects"][name] = {"translation_error_mm": metrics.translation_error(poses, gt),
                                   "rotation_error_deg": metrics.rotation_error(poses, gt)}
    # contact and collision against the estimated object poses (ground truth when absent)
    for h, V in sorted(hand_meshes.items()):
        name = truth.pairs.get(h)
        if name not in meshes:
            continue
        poses = object_poses.get(name, truth.object_poses[name])
        faces = models[h].faces
        others = [o for o in sorted(hand_meshes) if o != h]
        samples_c, samples_x, pen = [], [], []
        for f in range(0, len(V), mesh_stride):
            hand = TriMesh(V[f], faces)
            tool = meshes[name].transformed(poses[f])
            env = [meshes[n].transformed((object_poses.get(n) or truth.object_poses[n])[f])
                   for n in sorted(meshes) if n != name]
            env += [TriMesh(hand_meshes[o][f], models[o].faces) for o in others]
            samples_c.append((hand, tool))
            samples_x.append((hand, env))
            pen.append(metrics.penetration_volume(hand, tool, voxel))
        report["hands"][h].update({
            "penetration_volume_cm3": float(np.mean(pen)),
            "contact_ratio": metrics.contact_ratio(samples_c, voxel=voxel),
            "collision_ratio": metrics.collision_ratio(samples_x, voxel=voxel),
        })
    return report
