import json
import shutil
import subprocess
import sys

import pytest

from hoannot.cli import main
from hoannot.errors import InvalidSpec, MissingInput
from hoannot.pipeline import STAGES, PipelineConfig, load_object_poses, load_sequence_fit

# short runs: these tests check plumbing, not accuracy
FAST = {"registration": {"max_iter": 300},
        "fitting": {"stage1_iterations": 20, "stage2_iterations": 10, "warmup_iterations": 50},
        "evaluate": {"mesh_stride": 3}}


def make_session(root, frames=6, seed=2):
    spec = root / "spec.json"
    spec.write_text(json.dumps({"frames": frames, "seed": seed, "noise": {"keypoint_sigma": 1.0}}))
    assert main(["synth", str(root / "data"), "--spec", str(spec)]) == 0
    cfg_path = root / "data" / "config.json"
    cfg = json.loads(cfg_path.read_text())
    cfg.update(FAST)
    cfg_path.write_text(json.dumps(cfg))
    return cfg_path


@pytest.fixture(scope="module")
def session(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    cfg = make_session(root)
    assert main(["all", str(cfg)]) == 0
    return cfg


def test_all_writes_every_stage(session):
    out = session.parent / "out"
    for stage in STAGES:
        assert (out / f"manifest_{stage}.json").exists(), stage
    for name in ("cameras.json", "matches.json", "fused.jsonl", "registration.json", "object_poses.jsonl",
                 "fit.jsonl", "report.json"):
        assert (out / name).exists(), name
    report = json.loads((out / "report.json").read_text())
    assert set(report["hands"]) == {"left", "right"}
    assert set(report["objects"]["tool"]) == {"translation_error_mm", "rotation_error_deg"}
    assert {"mpjpe_mm", "pa_mpjpe_mm", "contact_ratio", "collision_ratio"} <= set(report["hands"]["right"])


def test_manifest_hashes_match(session):
    import hashlib
    out = session.parent / "out"
    doc = json.loads((out / "manifest_fit-hands.json").read_text())
    assert doc["stage"] == "fit-hands" and doc["seed"] == 0
    assert {"hoannot", "numpy", "scipy", "python"} <= set(doc["versions"])
    for rel, digest in {**doc["inputs"], **doc["outputs"]}.items():
        assert hashlib.sha256((session.parent / rel).read_bytes()).hexdigest() == digest
    assert "jobs" not in json.dumps(doc)


def test_outputs_load(session):
    out = session.parent / "out"
    fit = load_sequence_fit(out / "fit.jsonl")
    assert fit["left"][0].shape == (6, 48)
    poses = load_object_poses(out / "object_poses.jsonl")
    assert len(poses["tool"]) == 6 and all(p is not None for p in poses["tool"])


def test_jobs_do_not_change_artifacts(session, tmp_path):
    copy = tmp_path / "data"
    shutil.copytree(session.parent, copy, ignore=shutil.ignore_patterns("out"))
    assert main(["--jobs", "2", "all", str(copy / "config.json")]) == 0
    ref = session.parent / "out"
    names = sorted(p.name for p in ref.iterdir())
    assert names == sorted(p.name for p in (copy / "out").iterdir())
    for name in names:
        assert (ref / name).read_bytes() == (copy / "out" / name).read_bytes(), name


def test_single_stage_and_output_override(session, tmp_path):
    copy = tmp_path / "data"
    shutil.copytree(session.parent, copy, ignore=shutil.ignore_patterns("out"))
    assert main(["sync", str(copy / "config.json"), "--output", "elsewhere"]) == 0
    assert (copy / "elsewhere" / "matches.json").exists()


def test_missing_upstream_is_input_error(session, tmp_path, capsys):
    copy = tmp_path / "data"
    shutil.copytree(session.parent, copy, ignore=shutil.ignore_patterns("out"))
    assert main(["track-object", str(copy / "config.json")]) == 2
    assert "MissingInput" in capsys.readouterr().err
    assert main(["sync", str(tmp_path / "nope.json")]) == 2


def test_bad_config_is_input_error(tmp_path):
    p = tmp_path / "c.json"
    p.write_text("{")
    assert main(["sync", str(p)]) == 2
    p.write_text(json.dumps({"fitting": {"bogus": 1}}))
    assert main(["sync", str(p)]) == 2
    assert main(["--jobs", "0", "sync", str(p)]) == 2


def test_numeric_failure_exit_code(session, tmp_path, capsys):
    copy = tmp_path / "data"
    shutil.copytree(session.parent, copy, ignore=shutil.ignore_patterns("out"))
    calib = copy / "calibration.jsonl"
    lines = calib.read_text().splitlines()
    keep = [l for l in lines if json.loads(l)["camera_id"] != "cam00"]
    keep += [l for l in lines if json.loads(l)["camera_id"] == "cam00"][:3]
    calib.write_text("\n".join(keep) + "\n")
    assert main(["calibrate-extrinsic", str(copy / "config.json")]) == 1
    assert "InsufficientObservations" in capsys.readouterr().err


def test_env_overrides(tmp_path):
    env = {"HOANNOT_FITTING__LAMBDA_P": "0", "HOANNOT_REGISTRATION__LR": "0.001", "HOANNOT_FUSION__NOTE": "text",
           "OTHER": "1"}
    cfg = PipelineConfig({}, tmp_path, env)
    assert cfg.weights.lambda_p == 0
    assert cfg["registration"]["lr"] == 0.001 and cfg["registration"]["alpha"] == 0.01
    assert cfg["fusion"]["note"] == "text"
    with pytest.raises(InvalidSpec):
        PipelineConfig({}, tmp_path, {"HOANNOT_FITTING__WINDOW": "0"})
    with pytest.raises(MissingInput):
        cfg.path("keypoints")


def test_seed_and_jobs_from_environment(tmp_path, monkeypatch):
    from hoannot.cli import build_parser
    monkeypatch.setenv("HOANNOT_SEED", "7")
    monkeypatch.setenv("HOANNOT_JOBS", "3")
    args = build_parser().parse_args(["sync", "c.json"])
    assert (args.seed, args.jobs) == (7, 3)


def test_module_entry_point():
    res = subprocess.run([sys.executable, "-m", "hoannot", "--version"], capture_output=True, text=True)
    assert res.returncode == 0 and "hoannot" in res.stdout
