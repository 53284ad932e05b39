"""Stage orchestration over files: each stage reads upstream artifacts and writes its own.

All paths in a config are relative to the config file's directory. Every stage writes a
manifest with input/output hashes, the seed and library versions; nothing in it depends
on the worker count or wall-clock time, so reruns are byte-identical.
"""

import hashlib
import json
import os
import platform
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

import numpy as np
import scipy

from . import __version__
from .calibration import load_observations, load_streams, match_streams, solve_extrinsic
from .errors import HighResidual, InvalidSpec, MissingInput, SchemaError, TooFewMarkers
from .fitting import FittingWeights, HandTrack, SequenceFit, fit_hand, save_sequence_fit
from .fusion import fuse_hand, fused_record, load_fused, load_keypoints
from .geometry.camera import load_cameras, save_cameras
from .geometry.mesh import load_mesh
from .geometry.transform import RigidTransform
from .hand_model import HandPoseParams, load_model
from .metrics import frechet_distance, load_features, write_report
from .registration import frame_object_pose, load_marker_tracks, load_rigs, register_rig

STAGES = ("calibrate-extrinsic", "sync", "fuse-keypoints", "register-object", "track-object", "fit-hands", "evaluate")
ENV_PREFIX = "HOANNOT_"

DEFAULT_CONFIG = {
    "paths": {"output": "out"},
    "hands": {},
    "fitting": {},
    "fusion": {"radius_px": 30.0, "iterations": 200},
    "registration": {"alpha": 0.01, "lr": 1e-4, "max_iter": 20000},
    "tracking": {"max_rms": 0.005},
    "sync": {"reference": "cameras", "other": "mocap", "max_gap_ms": 17.0},
    "evaluate": {"mesh_stride": 5, "voxel": 0.001},
}


def _merge(base, over):
    out = dict(base)
    for k, v in over.items():
        out[k] = _merge(base[k], v) if isinstance(v, dict) and isinstance(base.get(k), dict) else v
    return out


class PipelineConfig:
    """JSON config plus HOANNOT_<SECTION>__<KEY>=<json value> environment overrides."""

    def __init__(self, data, root=".", environ=None):
        data = _merge(DEFAULT_CONFIG, data)
        for key, raw in sorted((environ if environ is not None else os.environ).items()):
            if not key.startswith(ENV_PREFIX) or "__" not in key:
                continue
            section, name = key[len(ENV_PREFIX):].lower().split("__", 1)
            try:
                value = json.loads(raw)
            except json.JSONDecodeError:
                value = raw
            data.setdefault(section, {})[name] = value
        self.data = data
        self.root = Path(root)
        try:
            self.weights = FittingWeights.from_dict(data["fitting"])
        except TypeError as exc:
            raise InvalidSpec(f"fitting settings: {exc}") from exc

    @classmethod
    def load(cls, path, environ=None):
        p = Path(path)
        if not p.exists():
            raise MissingInput(f"config file not found: {p}")
        try:
            data = json.loads(p.read_text())
        except json.JSONDecodeError as exc:
            raise SchemaError(f"{p}: invalid JSON ({exc.msg} at line {exc.lineno})") from exc
        return cls(data, p.parent, environ)

    def __getitem__(self, key):
        return self.data[key]

    def path(self, key, required=True):
        rel = self.data["paths"].get(key)
        if rel is None:
            if required:
                raise MissingInput(f"config.paths.{key} is not set")
            return None
        p = self.root / rel
        if required and not p.exists():
            raise MissingInput(f"missing input {key}: {p}")
        return p

    @property
    def output(self):
        out = self.root / self.data["paths"]["output"]
        out.mkdir(parents=True, exist_ok=True)
        return out

    def artifact(self, name, required=True):
        p = self.output / name
        if required and not p.exists():
            raise MissingInput(f"missing upstream artifact {p.name}; run the stage that produces it first")
        return p


def _sha256(path):
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def _rel(path, root):
    try:
        return str(Path(path).resolve().relative_to(Path(root).resolve()))
    except ValueError:
        return str(path)


def write_manifest(cfg, stage, seed, inputs, outputs):
    doc = {
        "stage": stage,
        "seed": seed,
        "versions": {"hoannot": __version__, "numpy": np.__version__, "scipy": scipy.__version__,
                     "python": platform.python_version()},
        "inputs": {_rel(p, cfg.root): _sha256(p) for p in inputs},
        "outputs": {_rel(p, cfg.root): _sha256(p) for p in outputs},
        "config": cfg.data,
    }
    path = cfg.output / f"manifest_{stage}.json"
    path.write_text(json.dumps(doc, indent=1, sort_keys=True) + "\n")
    return path


def _map(fn, items, jobs):
    """Ordered map; results never depend on the worker count."""
    items = list(items)
    if jobs <= 1 or len(items) <= 1:
        return [fn(x) for x in items]
    with ProcessPoolExecutor(max_workers=jobs) as pool:
        return list(pool.map(fn, items))


def _dump_jsonl(path, records):
    with open(path, "w") as fh:
        for r in records:
            fh.write(json.dumps(r, sort_keys=True) + "\n")


def _cameras(cfg):
    calibrated = cfg.artifact("cameras.json", required=False)
    if calibrated.exists():
        return calibrated, load_cameras(calibrated)
    p = cfg.path("cameras")
    return p, load_cameras(p)


# ---------------------------------------------------------------- stages

def stage_calibrate(cfg, seed=0, jobs=1):
    intr_path, obs_path = cfg.path("intrinsics"), cfg.path("calibration")
    intr = load_cameras(intr_path)
    obs = load_observations(obs_path)
    cams, residuals = [], {}
    for cam in intr:
        if cam.name not in obs:
            raise MissingInput(f"no calibration observations for camera {cam.name!r}")
        ext, err = solve_extrinsic(cam, obs[cam.name])
        cams.append(cam.with_extrinsic(ext))
        residuals[cam.name] = err
    out = cfg.output / "cameras.json"
    save_cameras(cams, out)
    res = cfg.output / "calibration_residuals.json"
    res.write_text(json.dumps({"mean_reprojection_px": residuals}, indent=1, sort_keys=True) + "\n")
    return [write_manifest(cfg, "calibrate-extrinsic", seed, [intr_path, obs_path], [out, res])]


def stage_sync(cfg, seed=0, jobs=1):
    path = cfg.path("streams")
    streams = load_streams(path)
    s = cfg["sync"]
    for key in ("reference", "other"):
        if s[key] not in streams:
            raise MissingInput(f"stream {s[key]!r} not found in {path}")
    matches = match_streams(streams[s["reference"]], streams[s["other"]], float(s["max_gap_ms"]))
    out = cfg.output / "matches.json"
    doc = {"reference": s["reference"], "other": s["other"], "max_gap_ms": float(s["max_gap_ms"]),
           "reference_count": len(streams[s["reference"]].timestamps),
           "matches": [{"ref_index": m.ref_index, "other_index": m.other_index, "dt": m.dt} for m in matches]}
    out.write_text(json.dumps(doc, sort_keys=True) + "\n")
    return [write_manifest(cfg, "sync", seed, [path], [out])]


def _frame_seed(seed, frame):
    return int(np.random.SeedSequence([seed, frame]).generate_state(1)[0])


def _fuse_task(args):
    cams, frame, hand, obs, radius, iterations, seed = args
    return fused_record(frame, hand, fuse_hand(cams, obs, radius, iterations, _frame_seed(seed, frame)))


def stage_fuse(cfg, seed=0, jobs=1):
    cam_path, cams = _cameras(cfg)
    kp_path = cfg.path("keypoints")
    obs = load_keypoints(kp_path, [c.name for c in cams])
    f = cfg["fusion"]
    tasks = [(cams, frame, hand, obs[(frame, hand)], float(f["radius_px"]), int(f["iterations"]), seed)
             for frame, hand in sorted(obs)]
    out = cfg.output / "fused.jsonl"
    _dump_jsonl(out, _map(_fuse_task, tasks, jobs))
    return [write_manifest(cfg, "fuse-keypoints", seed, [cam_path, kp_path], [out])]


def _load_objects(cfg):
    rigs_path = cfg.path("rigs")
    rigs = load_rigs(rigs_path)
    meshes, mesh_paths = {}, []
    for name, (_, _, mesh_rel) in sorted(rigs.items()):
        if mesh_rel is None:
            raise SchemaError(f"{rigs_path}: object {name!r} has no mesh")
        mp = rigs_path.parent / mesh_rel
        if not mp.exists():
            raise MissingInput(f"mesh for object {name!r} not found: {mp}")
        meshes[name] = load_mesh(mp)
        mesh_paths.append(mp)
    return rigs_path, rigs, meshes, mesh_paths


def _register_task(args):
    name, rig, T_init, mesh, reg = args
    res = register_rig(rig, mesh, T_init, float(reg["alpha"]), float(reg["lr"]), int(reg["max_iter"]))
    return name, {"T_star": res.T_star.to_dict(), "contact": res.contact.tolist(),
                  "penetration": res.penetration.tolist(), "active": res.active.astype(int).tolist(),
                  "objective": res.objective, "iterations": res.iterations}


def stage_register(cfg, seed=0, jobs=1):
    rigs_path, rigs, meshes, mesh_paths = _load_objects(cfg)
    tasks = []
    for name, (rig, T_init, _) in sorted(rigs.items()):
        tasks.append((name, rig, T_init or RigidTransform.identity(), meshes[name], cfg["registration"]))
    out = cfg.output / "registration.json"
    out.write_text(json.dumps({"objects": dict(_map(_register_task, tasks, jobs))}, indent=1, sort_keys=True) + "\n")
    return [write_manifest(cfg, "register-object", seed, [rigs_path] + mesh_paths, [out])]


def _track_task(args):
    name, rig, T_star, tracks, matches, n_frames, max_rms = args
    by_ref = {m["ref_index"]: m["other_index"] for m in matches}
    sample = {f: k for k, f in enumerate(tracks["frames"])}
    records = []
    for frame in range(n_frames):
        rec = {"frame": frame, "object": name}
        other = by_ref.get(frame)
        if other is None or other not in sample:
            rec["error"] = "no synchronized marker sample"
            records.append(rec)
            continue
        pos = tracks["positions"][sample[other]]
        rows = np.full((len(rig.tracked), 3), np.nan)
        for r, k in enumerate(rig.tracked):
            if k < len(pos):
                rows[r] = pos[k]
        try:
            pose, rms = frame_object_pose(rig, T_star, rows, max_rms)
            rec.update(pose.to_dict())
            rec["rms"] = rms
        except HighResidual as exc:
            rec.update(exc.pose.to_dict())
            rec["rms"] = exc.rms
            rec["error"] = str(exc)
        except TooFewMarkers as exc:
            rec["error"] = str(exc)
        records.append(rec)
    return records


def stage_track(cfg, seed=0, jobs=1):
    rigs_path, rigs, _, _ = _load_objects(cfg)
    reg_path = cfg.artifact("registration.json")
    match_path = cfg.artifact("matches.json")
    markers_path = cfg.path("markers")
    reg = json.loads(reg_path.read_text())["objects"]
    sync = json.loads(match_path.read_text())
    tracks = load_marker_tracks(markers_path)
    tasks = []
    for name, (rig, _, _) in sorted(rigs.items()):
        if name not in tracks:
            raise MissingInput(f"no marker tracks for object {name!r}")
        tasks.append((name, rig, RigidTransform.from_dict(reg[name]["T_star"]), tracks[name], sync["matches"],
                      sync["reference_count"], float(cfg["tracking"]["max_rms"])))
    out = cfg.output / "object_poses.jsonl"
    _dump_jsonl(out, [r for recs in _map(_track_task, tasks, jobs) for r in recs])
    return [write_manifest(cfg, "track-object", seed, [rigs_path, reg_path, match_path, markers_path], [out])]


def load_object_poses(path):
    """{object: [RigidTransform or None per frame]} from object_poses.jsonl (poses with errors kept)."""
    out = {}
    for lineno, line in enumerate(Path(path).read_text().splitlines(), 1):
        if not line.strip():
            continue
        try:
            rec = json.loads(line)
            seq = out.setdefault(rec["object"], {})
            seq[int(rec["frame"])] = RigidTransform.from_dict(rec) if "R" in rec else None
        except (json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
            raise SchemaError(f"{path}:{lineno}: bad object pose record ({exc!r})") from exc
    return {k: [v.get(f) for f in range(max(v) + 1)] for k, v in out.items()}


def _fit_task(args):
    hand, track, cams, weights = args
    theta, t, losses, diag = fit_hand(track, cams, weights)
    return hand, theta, t, losses, diag


def stage_fit(cfg, seed=0, jobs=1):
    cam_path, cams = _cameras(cfg)
    kp_path = cfg.path("keypoints")
    fused_path = cfg.artifact("fused.jsonl")
    poses_path = cfg.artifact("object_poses.jsonl", required=False)
    ids = [c.name for c in cams]
    obs = load_keypoints(kp_path, ids)
    fused = load_fused(fused_path)
    n = 1 + max(f for f, _ in obs) if obs else 0
    inputs = [cam_path, kp_path, fused_path]
    poses, meshes = {}, {}
    weights = cfg.weights
    if poses_path.exists():
        poses = load_object_poses(poses_path)
        rigs_path, _, meshes, mesh_paths = _load_objects(cfg)
        inputs += [poses_path, rigs_path] + mesh_paths
    tasks = []
    for hand, hc in sorted(cfg["hands"].items()):
        mp = cfg.root / cfg["paths"]["models"][hand]
        if not mp.exists():
            raise MissingInput(f"hand model for {hand!r} not found: {mp}")
        inputs.append(mp)
        model = load_model(mp)
        beta = np.asarray(hc.get("beta", np.zeros(10)), dtype=float)
        obj = hc.get("object")
        track = HandTrack(model, beta, [obs.get((f, hand)) for f in range(n)], [fused.get((f, hand)) for f in range(n)])
        if obj in poses and obj in meshes:
            seq = poses[obj] + [None] * (n - len(poses[obj]))
            track.mesh, track.poses = meshes[obj], seq[:n]
        tasks.append((hand, track, cams, weights))
    params, losses, diags, failures = {}, {}, {}, {}
    betas = {hand: track.beta for hand, track, _, _ in tasks}
    for hand, theta, t, L, diag in _map(_fit_task, tasks, jobs):
        params[hand] = [HandPoseParams(theta[k], betas[hand], t[k]) for k in range(n)]
        losses[hand] = L
        failures[hand] = diag.pop("failures")
        diags[hand] = diag
    fit = SequenceFit(list(range(n)), params, losses, diags, failures)
    out = cfg.output / "fit.jsonl"
    save_sequence_fit(fit, out)
    diag_path = cfg.output / "fit_diagnostics.json"
    diag_path.write_text(json.dumps({"diagnostics": diags, "failures": {h: {str(k): v for k, v in f.items()}
                                                                         for h, f in failures.items()}},
                                    indent=1, sort_keys=True) + "\n")
    return [write_manifest(cfg, "fit-hands", seed, inputs, [out, diag_path])]


def load_sequence_fit(path):
    """{hand: (theta (F, 48), t (F, 3))} from fit.jsonl."""
    recs = [json.loads(line) for line in Path(path).read_text().splitlines() if line.strip()]
    recs.sort(key=lambda r: r["frame"])
    out = {}
    for hand in ("left", "right"):
        rows = [r[hand] for r in recs]
        if rows and all(r is not None for r in rows):
            out[hand] = (np.array([r["theta"] for r in rows]), np.array([r["t"] for r in rows]))
    return out


def stage_evaluate(cfg, seed=0, jobs=1):
    from .synth import Truth, score_pipeline

    gt_path = cfg.path("groundtruth")
    fit_path = cfg.artifact("fit.jsonl")
    truth = Truth.load(gt_path)
    inputs = [gt_path, fit_path]
    models = {}
    for hand, rel in sorted(cfg["paths"].get("models", {}).items()):
        models[hand] = load_model(cfg.root / rel)
        inputs.append(cfg.root / rel)
    hand_params = {h: v for h, v in load_sequence_fit(fit_path).items() if h in models}
    poses_path = cfg.artifact("object_poses.jsonl", required=False)
    meshes, object_poses = {}, {}
    if poses_path.exists():
        rigs_path, _, meshes, mesh_paths = _load_objects(cfg)
        inputs += [poses_path, rigs_path] + mesh_paths
        for name, seq in load_object_poses(poses_path).items():
            gt = truth.object_poses[name]
            object_poses[name] = [p if p is not None else g for p, g in zip(seq, gt)]
    ev = cfg["evaluate"]
    report = score_pipeline(truth, models, meshes, hand_params, object_poses,
                            int(ev["mesh_stride"]), float(ev["voxel"]))
    fa, fb = cfg.data["paths"].get("features_a"), cfg.data["paths"].get("features_b")
    if fa and fb:
        pa, pb = cfg.path("features_a"), cfg.path("features_b")
        report["frechet_distance"] = frechet_distance(load_features(pa), load_features(pb))
        inputs += [pa, pb]
    out = cfg.output / "report.json"
    write_report(report, out)
    return [write_manifest(cfg, "evaluate", seed, inputs, [out])]


STAGE_FUNCS = {
    "calibrate-extrinsic": stage_calibrate,
    "sync": stage_sync,
    "fuse-keypoints": stage_fuse,
    "register-object": stage_register,
    "track-object": stage_track,
    "fit-hands": stage_fit,
    "evaluate": stage_evaluate,
}


def run_stage(name, cfg, seed=0, jobs=1):
    if name not in STAGE_FUNCS:
        raise InvalidSpec(f"unknown stage {name!r}")
    return STAGE_FUNCS[name](cfg, seed, jobs)


def run_all(cfg, seed=0, jobs=1):
    """Every stage in order; calibration runs only when intrinsics and observations are configured."""
    manifests = []
    for name in STAGES:
        if name == "calibrate-extrinsic" and not (cfg.data["paths"].get("intrinsics")
                                                  and cfg.data["paths"].get("calibration")):
            continue
        if name == "evaluate" and not cfg.data["paths"].get("groundtruth"):
            continue
        manifests += run_stage(name, cfg, seed, jobs)
    return manifests
