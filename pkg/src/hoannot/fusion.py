"""Multi-view 3D hand keypoints: RANSAC over camera pairs with a pixel-radius inlier test."""

import itertools
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import NoConsensus, NumericError, SchemaError, TooFewViews
from .geometry.camera import MIN_BASELINE, MIN_RAY_ANGLE, MIN_DEPTH, closest_points_on_rays, triangulate_rays

NUM_JOINTS = 21
DEFAULT_RADIUS_PX = 30.0
EXHAUSTIVE_MAX_CAMERAS = 12
DEFAULT_ITERATIONS = 200


@dataclass
class Keypoints2D:
    """One hand in one frame, observed by C cameras (rows aligned with the camera list)."""

    camera_ids: list
    pixels: np.ndarray  # (C, 21, 2)
    confidence: np.ndarray  # (C, 21)
    present: np.ndarray  # (C, 21) bool

    @classmethod
    def empty(cls, camera_ids):
        C = len(camera_ids)
        return cls(list(camera_ids), np.zeros((C, NUM_JOINTS, 2)), np.zeros((C, NUM_JOINTS)),
                   np.zeros((C, NUM_JOINTS), dtype=bool))

    @classmethod
    def from_pixels(cls, camera_ids, pixels, confidence=None, present=None):
        pixels = np.asarray(pixels, dtype=float)
        shape = pixels.shape[:2]
        conf = np.ones(shape) if confidence is None else np.asarray(confidence, dtype=float)
        pres = np.ones(shape, dtype=bool) if present is None else np.asarray(present, dtype=bool)
        return cls(list(camera_ids), pixels, conf, pres)


@dataclass
class JointFusion:
    point: np.ndarray
    valid: np.ndarray  # (C,) bool
    inlier_count: int
    pair: tuple = ()


@dataclass
class FusedKeypoints3D:
    points: np.ndarray  # (21, 3); NaN rows for absent joints
    present: np.ndarray  # (21,) bool
    valid: np.ndarray  # (C, 21) bool
    inlier_count: np.ndarray  # (21,) int
    camera_ids: list = field(default_factory=list)
    reasons: dict = field(default_factory=dict)  # joint -> failure reason


def around_2d(cameras, point, pixels, present, radius_px):
    """Per-camera flag: projection of `point` lies strictly within radius_px of the observation."""
    flags = np.zeros(len(cameras), dtype=bool)
    for c, cam in enumerate(cameras):
        if not present[c]:
            continue
        if cam.to_camera(point)[2] <= MIN_DEPTH:
            continue
        flags[c] = np.linalg.norm(cam.project(point, check_depth=False) - pixels[c]) < radius_px
    return flags


def _candidate_pairs(views, n_cameras, iterations, rng):
    if n_cameras <= EXHAUSTIVE_MAX_CAMERAS:
        return list(itertools.combinations(views, 2))
    pairs = []
    for _ in range(iterations):
        a, b = rng.choice(views, size=2, replace=False)
        pairs.append((int(min(a, b)), int(max(a, b))))
    return pairs


def _score(cameras, points, pixels, present, confidence, radius_px):
    """Inlier counts and inlier confidence sums for candidate points (P, 3)."""
    counts = np.zeros(len(points), dtype=np.int64)
    conf = np.zeros(len(points))
    for c, cam in enumerate(cameras):
        if not present[c]:
            continue
        z = cam.to_camera(points)[:, 2]
        px = cam.project(points, check_depth=False)
        inl = (z > MIN_DEPTH) & (np.linalg.norm(px - pixels[c], axis=1) < radius_px)
        counts += inl
        conf += inl * confidence[c]
    return counts, conf


def fuse_joint(cameras, obs, joint, radius_px=DEFAULT_RADIUS_PX, iterations=DEFAULT_ITERATIONS, seed=0, refine=True):
    """Select the pair-triangulated 3D point supported by the most 2D observations.

    Up to 12 cameras every pair is enumerated; larger rigs sample `iterations` pairs.
    Ties on inlier count go to the larger inlier confidence sum, then to the first pair.
    With `refine`, the winner is re-triangulated from all its inlier rays; the refined
    point is kept only if it supports at least as many observations.
    """
    if radius_px <= 0:
        raise ValueError("radius_px must be positive")
    pixels = obs.pixels[:, joint]
    present = obs.present[:, joint] & np.all(np.isfinite(pixels), axis=1)
    confidence = obs.confidence[:, joint]
    views = np.flatnonzero(present)
    if len(views) < 2:
        raise TooFewViews(f"joint {joint}: {len(views)} view(s) present")

    rng = np.random.default_rng([seed, joint])
    pairs = _candidate_pairs(views, len(cameras), iterations, rng)
    centers = np.array([cam.center for cam in cameras])
    rays = np.zeros((len(cameras), 3))
    for c in views:
        rays[c] = cameras[c].rays(pixels[c])
    a = np.array([p[0] for p in pairs])
    b = np.array([p[1] for p in pairs])
    mids, sin_angle = closest_points_on_rays(centers[a], rays[a], centers[b], rays[b])
    ok = (np.linalg.norm(centers[a] - centers[b], axis=1) > MIN_BASELINE) & (sin_angle >= np.sin(MIN_RAY_ANGLE))
    if not np.any(ok):
        raise NoConsensus(f"joint {joint}: no well-conditioned camera pair")

    counts, conf = _score(cameras, mids, pixels, present, confidence, radius_px)
    counts[~ok] = -1
    best = max(range(len(pairs)), key=lambda k: (counts[k], conf[k], -k))
    if counts[best] < 2:
        raise NoConsensus(f"joint {joint}: best candidate has {max(counts[best], 0)} inlier(s)")
    point = mids[best]
    count = int(counts[best])
    valid = around_2d(cameras, point, pixels, present, radius_px)

    if refine:
        for _ in range(3):
            if valid.sum() < 2:
                break
            idx = np.flatnonzero(valid)
            cand = triangulate_rays(centers[idx], rays[idx])
            cand_valid = around_2d(cameras, cand, pixels, present, radius_px)
            if cand_valid.sum() < count:
                break
            converged = np.array_equal(cand_valid, valid)
            point, valid, count = cand, cand_valid, int(cand_valid.sum())
            if converged:
                break
    return JointFusion(point, valid, count, pairs[best])


def fuse_hand(cameras, obs, radius_px=DEFAULT_RADIUS_PX, iterations=DEFAULT_ITERATIONS, seed=0, refine=True):
    """Fuse all 21 joints independently; failing joints are marked absent with a reason."""
    C = len(cameras)
    points = np.full((NUM_JOINTS, 3), np.nan)
    present = np.zeros(NUM_JOINTS, dtype=bool)
    valid = np.zeros((C, NUM_JOINTS), dtype=bool)
    inliers = np.zeros(NUM_JOINTS, dtype=np.int64)
    reasons = {}
    for j in range(NUM_JOINTS):
        try:
            res = fuse_joint(cameras, obs, j, radius_px, iterations, seed, refine)
        except NumericError as exc:
            reasons[j] = f"{type(exc).__name__}: {exc}"
            continue
        points[j] = res.point
        present[j] = True
        valid[:, j] = res.valid
        inliers[j] = res.inlier_count
    return FusedKeypoints3D(points, present, valid, inliers, list(obs.camera_ids), reasons)


# ---------------------------------------------------------------- JSON lines

def load_keypoints(path, camera_ids):
    """Per-view records {"frame", "hand", "camera_id", "joints": [{"id","x","y","confidence"}]}.

    Returns {(frame, hand): Keypoints2D} with rows ordered like `camera_ids`.
    """
    row = {cid: i for i, cid in enumerate(camera_ids)}
    out = {}
    for lineno, line in enumerate(Path(path).read_text().splitlines(), 1):
        if not line.strip():
            continue
        try:
            rec = json.loads(line)
            key = (int(rec["frame"]), str(rec.get("hand", "right")))
            c = row[str(rec["camera_id"])]
            kp = out.setdefault(key, Keypoints2D.empty(camera_ids))
            for jrec in rec["joints"]:
                j = int(jrec["id"])
                if not 0 <= j < NUM_JOINTS:
                    raise ValueError(f"joint id {j} out of range")
                kp.pixels[c, j] = (float(jrec["x"]), float(jrec["y"]))
                conf = float(jrec.get("confidence", 1.0))
                if not 0.0 <= conf <= 1.0:
                    raise ValueError(f"confidence {conf} outside [0, 1]")
                kp.confidence[c, j] = conf
                kp.present[c, j] = True
        except json.JSONDecodeError as exc:
            raise SchemaError(f"{path}:{lineno}: invalid JSON ({exc.msg})") from exc
        except KeyError as exc:
            raise SchemaError(f"{path}:{lineno}: missing or unknown field {exc}") from exc
        except (TypeError, ValueError) as exc:
            raise SchemaError(f"{path}:{lineno}: {exc}") from exc
    return out


def keypoint_records(frame, hand, obs):
    for c, cid in enumerate(obs.camera_ids):
        joints = [{"id": j, "x": float(obs.pixels[c, j, 0]), "y": float(obs.pixels[c, j, 1]),
                   "confidence": float(obs.confidence[c, j])}
                  for j in range(NUM_JOINTS) if obs.present[c, j]]
        yield {"frame": frame, "hand": hand, "camera_id": cid, "joints": joints}


def fused_record(frame, hand, fused):
    joints = []
    for j in range(NUM_JOINTS):
        if fused.present[j]:
            x, y, z = fused.points[j].tolist()
            joints.append({"id": j, "x": x, "y": y, "z": z, "inliers": int(fused.inlier_count[j])})
        else:
            joints.append({"id": j, "absent": fused.reasons.get(j, "absent")})
    valid = {cid: fused.valid[c].astype(int).tolist() for c, cid in enumerate(fused.camera_ids)}
    return {"frame": frame, "hand": hand, "joints": joints, "valid": valid}


def fused_from_record(rec):
    cams = list(rec["valid"].keys())
    points = np.full((NUM_JOINTS, 3), np.nan)
    present = np.zeros(NUM_JOINTS, dtype=bool)
    inliers = np.zeros(NUM_JOINTS, dtype=np.int64)
    reasons = {}
    for jrec in rec["joints"]:
        j = int(jrec["id"])
        if "absent" in jrec:
            reasons[j] = jrec["absent"]
            continue
        points[j] = (jrec["x"], jrec["y"], jrec["z"])
        present[j] = True
        inliers[j] = jrec.get("inliers", 0)
    valid = np.array([rec["valid"][c] for c in cams], dtype=bool).reshape(len(cams), NUM_JOINTS)
    return FusedKeypoints3D(points, present, valid, inliers, cams, reasons)


def load_fused(path):
    out = {}
    for lineno, line in enumerate(Path(path).read_text().splitlines(), 1):
        if not line.strip():
            continue
        try:
            rec = json.loads(line)
            out[(int(rec["frame"]), str(rec["hand"]))] = fused_from_record(rec)
        except (json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
            raise SchemaError(f"{path}:{lineno}: bad fused keypoint record ({exc!r})") from exc
    return out
