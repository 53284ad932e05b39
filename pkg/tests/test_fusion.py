import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from hoannot.errors import NoConsensus, SchemaError, TooFewViews
from hoannot.fusion import (DEFAULT_RADIUS_PX, Keypoints2D, around_2d, fuse_hand, fuse_joint, fused_from_record,
                            fused_record, keypoint_records, load_fused, load_keypoints)
from hoannot.geometry import closest_points_on_rays


def observe(cams, joints, sigma=0.0, rng=None):
    px = np.stack([c.project(joints) for c in cams])
    if sigma:
        px = px + rng.normal(size=px.shape) * sigma
    return Keypoints2D.from_pixels([c.name for c in cams], px)


def hand_points(rng):
    return rng.uniform(-0.1, 0.1, size=(21, 3))


def test_default_radius():
    assert DEFAULT_RADIUS_PX == 30.0


def test_noiseless_joint(ring, rng):
    X = hand_points(rng)
    res = fuse_joint(ring, observe(ring, X), 3)
    assert np.linalg.norm(res.point - X[3]) < 1e-9
    assert res.inlier_count == 12
    assert res.valid.all()


def test_noiseless_hand(ring, rng):
    X = hand_points(rng)
    fused = fuse_hand(ring, observe(ring, X))
    assert fused.present.all()
    assert np.abs(fused.points - X).max() < 1e-6


def test_planted_outliers(ring, rng):
    X = hand_points(rng)
    obs = observe(ring, X, 2.0, rng)
    bad = [2, 7]
    d = rng.normal(size=(2, 21, 2))
    obs.pixels[bad] += 200.0 * d / np.linalg.norm(d, axis=-1, keepdims=True)
    fused = fuse_hand(ring, obs)
    assert not fused.valid[bad].any()
    assert np.linalg.norm(fused.points - X, axis=1).max() < 0.005


def test_single_view_joint_absent(ring, rng):
    X = hand_points(rng)
    obs = observe(ring, X)
    obs.present[1:, 5] = False
    with pytest.raises(TooFewViews):
        fuse_joint(ring, obs, 5)
    fused = fuse_hand(ring, obs)
    assert not fused.present[5]
    assert np.isnan(fused.points[5]).all()
    assert "TooFewViews" in fused.reasons[5]
    others = np.delete(np.arange(21), 5)
    assert np.abs(fused.points[others] - X[others]).max() < 1e-6


def test_no_consensus(ring, rng):
    # two views that disagree with everything, including each other
    obs = observe(ring, hand_points(rng))
    obs.present[2:, 0] = False
    obs.pixels[1, 0] += 500.0
    with pytest.raises(NoConsensus):
        fuse_joint(ring, obs, 0)


@given(st.integers(0, 10**6))
@settings(max_examples=20, deadline=None)
def test_valid_flags_are_around_2d(seed):
    from hoannot.synth import camera_ring
    cams = camera_ring()
    rng = np.random.default_rng(seed)
    X = hand_points(rng)
    obs = observe(cams, X, 5.0, rng)
    out = rng.random(obs.present.shape) < 0.2
    obs.pixels[out] += rng.uniform(-300, 300, size=(out.sum(), 2))
    fused = fuse_hand(cams, obs)
    for j in np.flatnonzero(fused.present):
        flags = around_2d(cams, fused.points[j], obs.pixels[:, j], obs.present[:, j], 30.0)
        assert np.array_equal(flags, fused.valid[:, j])
        assert fused.inlier_count[j] == flags.sum()


def test_consensus_dominates_every_pair(ring, rng):
    X = hand_points(rng)
    obs = observe(ring, X, 8.0, rng)
    obs.pixels[:4, 0] += 150.0
    res = fuse_joint(ring, obs, 0, refine=False)
    centers = np.array([c.center for c in ring])
    rays = np.array([c.rays(obs.pixels[c_i, 0]) for c_i, c in enumerate(ring)])
    for a in range(12):
        for b in range(a + 1, 12):
            mid, _ = closest_points_on_rays(centers[a], rays[a], centers[b], rays[b])
            n = around_2d(ring, mid, obs.pixels[:, 0], obs.present[:, 0], 30.0).sum()
            assert res.inlier_count >= n


def test_deterministic_given_seed(ring, rng):
    X = hand_points(rng)
    obs = observe(ring, X, 3.0, rng)
    a = fuse_hand(ring, obs, seed=3)
    b = fuse_hand(ring, obs, seed=3)
    assert np.array_equal(a.points, b.points)
    assert np.array_equal(a.valid, b.valid)


def test_large_rig_samples_pairs(rng):
    from hoannot.synth import camera_ring
    cams = camera_ring(count=20)
    X = hand_points(rng)
    obs = observe(cams, X, 1.0, rng)
    a = fuse_hand(cams, obs, iterations=50, seed=1)
    b = fuse_hand(cams, obs, iterations=50, seed=1)
    assert np.array_equal(a.points, b.points)
    assert np.linalg.norm(a.points - X, axis=1).max() < 0.005


def test_confidence_breaks_ties(ring, rng):
    X = hand_points(rng)
    obs = observe(ring, X)
    # two disjoint clusters of views of equal size: the more confident cluster wins
    obs.present[:, 0] = False
    obs.present[[0, 1, 2], 0] = True
    obs.present[[6, 7, 8], 0] = True
    other = np.stack([c.project(X[0] + [0.2, 0.2, 0.0]) for c in ring])
    obs.pixels[[6, 7, 8], 0] = other[[6, 7, 8]]
    obs.confidence[[6, 7, 8], 0] = 0.9
    obs.confidence[[0, 1, 2], 0] = 0.5
    res = fuse_joint(ring, obs, 0, refine=False)
    assert set(np.flatnonzero(res.valid)) == {6, 7, 8}


def test_keypoint_json_round_trip(tmp_path, ring, rng):
    obs = observe(ring, hand_points(rng))
    obs.present[3, 4] = False
    with open(tmp_path / "k.jsonl", "w") as fh:
        for rec in keypoint_records(7, "left", obs):
            fh.write(json.dumps(rec) + "\n")
    back = load_keypoints(tmp_path / "k.jsonl", [c.name for c in ring])[(7, "left")]
    assert np.array_equal(back.present, obs.present)
    assert np.array_equal(back.pixels[obs.present], obs.pixels[obs.present])


def test_fused_json_round_trip(tmp_path, ring, rng):
    obs = observe(ring, hand_points(rng))
    obs.present[1:, 5] = False
    fused = fuse_hand(ring, obs)
    (tmp_path / "f.jsonl").write_text(json.dumps(fused_record(0, "right", fused)) + "\n")
    back = load_fused(tmp_path / "f.jsonl")[(0, "right")]
    assert np.array_equal(back.present, fused.present)
    assert np.array_equal(back.valid, fused.valid)
    assert np.array_equal(back.points[fused.present], fused.points[fused.present])
    assert back.reasons == fused.reasons
    assert fused_from_record(fused_record(0, "right", fused)).camera_ids == fused.camera_ids


@pytest.mark.parametrize("joint", ['{"id": 30, "x": 1, "y": 2}', '{"id": 1, "x": 1, "y": 2, "confidence": 2}',
                                   '{"id": 1, "x": 1}'])
def test_bad_keypoint_records(tmp_path, joint):
    p = tmp_path / "k.jsonl"
    p.write_text('{"frame": 0, "camera_id": "cam00", "joints": [%s]}\n' % joint)
    with pytest.raises(SchemaError):
        load_keypoints(p, ["cam00"])
    p.write_text('{"frame": 0, "camera_id": "nope", "joints": []}\n')
    with pytest.raises(SchemaError):
        load_keypoints(p, ["cam00"])
