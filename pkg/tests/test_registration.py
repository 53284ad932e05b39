import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from hoannot.errors import HighResidual, InvariantViolation, NoActiveMarkers, SchemaError, TooFewMarkers
from hoannot.geometry import RigidTransform, blob, icosphere, random_rotation
from hoannot.registration import (MarkerRig, contact_gradient, contact_loss, contact_terms, frame_object_pose,
                                  load_marker_tracks, load_rigs, penetration_loss, register_rig, rig_record)


def brute(q, mesh):
    d = np.linalg.norm(mesh.vertices - q, axis=1)
    i = int(np.argmin(d))
    return d[i], max(-mesh.vertex_normals[i] @ (q - mesh.vertices[i]), 0.0)


def planted(seed, count=14, mesh=None):
    rng = np.random.default_rng(seed)
    mesh = blob(0.05, 4, seed=3, amplitude=0.25) if mesh is None else mesh
    vids = rng.choice(len(mesh.vertices), count, replace=False)
    T = RigidTransform(random_rotation(rng), rng.normal(size=3) * 0.05)  # rig -> model
    rig = MarkerRig(T.inverse().apply(mesh.vertices[vids]))
    return rng, mesh, rig, T


def perturb(T, rng, mm=5.0, deg=5.0):
    a, d = rng.normal(size=3), rng.normal(size=3)
    D = RigidTransform.from_rotvec(a / np.linalg.norm(a) * np.deg2rad(deg), d / np.linalg.norm(d) * mm * 1e-3)
    return D @ T


# ---------------------------------------------------------------- losses

def test_contact_on_vertex():
    s = icosphere(0.05, 3)
    assert contact_loss(s.vertices[10], s) == 0.0
    assert penetration_loss(s.vertices[10], s) == 0.0


def test_contact_along_normal():
    s = icosphere(0.05, 5)  # dense: vertex spacing well below 1 cm
    q = s.vertices[7] + 0.01 * s.vertex_normals[7]
    assert contact_loss(q, s) == pytest.approx(0.01, abs=1e-12)
    assert penetration_loss(q, s) == 0.0


def test_penetration_depth_inside_sphere():
    s = icosphere(0.05, 4)
    d = 0.003
    q = s.vertices[11] - d * s.vertex_normals[11]
    assert penetration_loss(q, s) == pytest.approx(d, abs=1e-12)


@given(st.integers(0, 10**6))
@settings(max_examples=20, deadline=None)
def test_losses_match_brute_force(seed):
    rng = np.random.default_rng(seed)
    mesh = blob(0.05, 3, seed=seed % 7)
    q = rng.normal(size=(50, 3)) * 0.04
    _, d, p = contact_terms(q, mesh)
    for k in range(len(q)):
        bd, bp = brute(q[k], mesh)
        assert d[k] == pytest.approx(bd, abs=1e-15)
        assert p[k] == pytest.approx(bp, abs=1e-15)


def test_contact_gradient_finite_differences():
    rng = np.random.default_rng(0)
    mesh = blob(0.05, 3, seed=1)
    q = rng.normal(size=(30, 3)) * 0.04
    _, g, _, _ = contact_gradient(q, mesh)
    i0, _, _ = contact_terms(q, mesh)
    h = 1e-7
    for k in range(len(q)):
        fd = np.zeros(3)
        for a in range(3):
            e = np.zeros(3)
            e[a] = h
            ip, dp, pp = contact_terms(q[k] + e, mesh)
            im, dm, pm = contact_terms(q[k] - e, mesh)
            assert ip[0] == im[0] == i0[k]
            fd[a] = ((dp + pp) - (dm + pm))[0] / (2 * h)
        assert np.linalg.norm(fd - g[k]) < 1e-6 * np.linalg.norm(g[k])


# ---------------------------------------------------------------- rig registration

def test_rig_invariants():
    with pytest.raises(InvariantViolation):
        MarkerRig(np.zeros((2, 3)))
    with pytest.raises(InvariantViolation):
        MarkerRig(np.outer(np.arange(4.0), [1, 0, 0]))
    with pytest.raises(InvariantViolation):
        MarkerRig(np.eye(3), tracked=(0, 1))


def test_register_recovers_planted_rig():
    rng, mesh, rig, T = planted(2)
    res = register_rig(rig, mesh, perturb(T, rng))
    assert res.contact.mean() < 0.001
    assert np.array_equal(res.active, res.contact < 0.01)
    assert res.history[-1] <= res.history[0]


def test_register_already_aligned():
    _, mesh, rig, T = planted(4)
    res = register_rig(rig, mesh, T, max_iter=50)
    assert res.iterations == 0
    assert np.allclose(res.T_star.as_matrix(), T.as_matrix(), atol=1e-12)
    assert res.contact.max() < 1e-15


def test_register_no_active_markers():
    _, mesh, rig, T = planted(5)
    far = RigidTransform(np.eye(3), [0.0, 0.0, 1.0]) @ T
    with pytest.raises(NoActiveMarkers):
        register_rig(rig, mesh, far)


def test_register_vertex_gradient_mode_runs():
    rng, mesh, rig, T = planted(6)
    res = register_rig(rig, mesh, perturb(T, rng), max_iter=200, gradient="vertex")
    assert res.history[-1] <= res.history[0]
    with pytest.raises(ValueError):
        register_rig(rig, mesh, T, gradient="bogus")


# ---------------------------------------------------------------- per-frame pose

def test_frame_pose_exact():
    rng, mesh, rig, T = planted(7)
    P = RigidTransform(random_rotation(rng), rng.normal(size=3))
    world = P.apply(T.apply(rig.marker_local[list(rig.tracked)]))
    pose, rms = frame_object_pose(rig, T, world)
    assert np.abs(pose.as_matrix() - P.as_matrix()).max() < 1e-9
    assert rms < 1e-9


def test_frame_pose_dropped_marker():
    rng, mesh, rig, T = planted(8)
    P = RigidTransform(random_rotation(rng), rng.normal(size=3))
    world = P.apply(T.apply(rig.marker_local[list(rig.tracked)]))
    world[2] = np.nan
    pose, _ = frame_object_pose(rig, T, world)
    assert np.abs(pose.as_matrix() - P.as_matrix()).max() < 1e-6
    world[1] = np.nan
    with pytest.raises(TooFewMarkers):
        frame_object_pose(rig, T, world)


def test_frame_pose_high_residual():
    rng, mesh, rig, T = planted(9)
    world = T.apply(rig.marker_local[list(rig.tracked)])
    world[0] += 0.02
    with pytest.raises(HighResidual) as info:
        frame_object_pose(rig, T, world)
    assert info.value.rms > 0.005


@given(st.integers(0, 10**6))
@settings(max_examples=30)
def test_frame_pose_equivariant(seed):
    rng, mesh, rig, T = planted(seed % 50)
    rng = np.random.default_rng(seed)
    world = T.apply(rig.marker_local[list(rig.tracked)]) + rng.normal(size=(4, 3)) * 5e-4
    G = RigidTransform(random_rotation(rng), rng.normal(size=3))
    pose, _ = frame_object_pose(rig, T, world)
    pose2, _ = frame_object_pose(rig, T, G.apply(world))
    assert np.abs((G @ pose).as_matrix() - pose2.as_matrix()).max() < 1e-9


# ---------------------------------------------------------------- files

def test_rig_file_round_trip(tmp_path):
    rng, mesh, rig, T = planted(10)
    doc = {"objects": {"tool": rig_record(rig, T, "meshes/tool.ply")}}
    (tmp_path / "rigs.json").write_text(json.dumps(doc))
    back, T_init, path = load_rigs(tmp_path / "rigs.json")["tool"]
    assert np.array_equal(back.marker_local, rig.marker_local)
    assert back.tracked == rig.tracked
    assert np.array_equal(T_init.rotation, T.rotation)
    assert path == "meshes/tool.ply"


def test_rig_file_errors(tmp_path):
    p = tmp_path / "rigs.json"
    p.write_text('{"objects": {"a": {"marker_local": [[0, 0, 0], [1, 0, 0]]}}}')
    with pytest.raises(SchemaError):
        load_rigs(p)
    p.write_text("{")
    with pytest.raises(SchemaError):
        load_rigs(p)


def test_marker_tracks(tmp_path):
    p = tmp_path / "m.jsonl"
    recs = [{"frame": f, "object": "tool", "timestamp": 8.0 * f,
             "markers": [{"id": k, "x": f, "y": k, "z": 0.0, "visible": k != 1 or f != 1} for k in range(4)]}
            for f in range(3)]
    p.write_text("".join(json.dumps(r) + "\n" for r in recs))
    tracks = load_marker_tracks(p)["tool"]
    pos = np.asarray(tracks["positions"])
    assert pos.shape == (3, 4, 3)
    assert np.isnan(pos[1, 1]).all()
    assert pos[2, 3].tolist() == [2.0, 3.0, 0.0]
