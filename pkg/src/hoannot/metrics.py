"""Evaluation metrics: joint errors, object pose errors, smoothness, contact and collision, feature distance."""

import csv
import json

import numpy as np
from scipy import linalg

from .errors import DegenerateCovariance, EmptyInput, ShapeMismatch, WindowTooShort
from .geometry.align import apply_similarity, rigid_align
from .geometry.mesh import build_index, voxel_intersection_volume

FPS = 30.0
CONTACT_THRESHOLD_MM = 2.0
FEATURE_DIM = 64


def _pair(pred, gt, last=(21, 3)):
    pred = np.asarray(pred, dtype=float)
    gt = np.asarray(gt, dtype=float)
    if pred.shape != gt.shape or pred.shape[-len(last):] != last:
        raise ShapeMismatch(f"expected matching (..., {last}) arrays, got {pred.shape} and {gt.shape}")
    return pred.reshape((-1,) + last), gt.reshape((-1,) + last)


def mpjpe(pred, gt):
    """Mean per-joint Euclidean error (mm) over frames x 21 joints, inputs in meters."""
    pred, gt = _pair(pred, gt)
    return float(np.linalg.norm(pred - gt, axis=-1).mean() * 1000.0)


def procrustes_align(pred, gt):
    """Per-frame similarity alignment of pred onto gt."""
    pred, gt = _pair(pred, gt)
    out = np.empty_like(pred)
    for k in range(len(pred)):
        T, s = rigid_align(pred[k], gt[k], with_scale=True)
        out[k] = apply_similarity(T, s, pred[k])
    return out


def pa_mpjpe(pred, gt):
    """MPJPE after per-frame rotation, translation and scale alignment (mm)."""
    return mpjpe(procrustes_align(pred, gt), gt)


def _poses(seq):
    R = np.stack([p.rotation for p in seq]) if len(seq) else np.zeros((0, 3, 3))
    t = np.stack([p.translation for p in seq]) if len(seq) else np.zeros((0, 3))
    return R, t


def translation_error(pred, gt):
    """Mean translation distance (mm) between two RigidTransform sequences."""
    if len(pred) != len(gt) or len(pred) == 0:
        raise ShapeMismatch(f"pose sequences must be non-empty and equal length ({len(pred)} vs {len(gt)})")
    _, tp = _poses(pred)
    _, tg = _poses(gt)
    return float(np.linalg.norm(tp - tg, axis=1).mean() * 1000.0)


def rotation_angles(pred_R, gt_R):
    """Geodesic angles (degrees) between rotation stacks.

    Equal to arccos((tr(Rp^T Rg) - 1) / 2) with the argument clamped to [-1, 1], but
    evaluated as atan2(sin, cos) so small angles keep full precision.
    """
    rel = np.einsum("fji,fjk->fik", pred_R, gt_R)
    c = np.clip((np.trace(rel, axis1=1, axis2=2) - 1.0) / 2.0, -1.0, 1.0)
    w = np.stack([rel[:, 2, 1] - rel[:, 1, 2], rel[:, 0, 2] - rel[:, 2, 0], rel[:, 1, 0] - rel[:, 0, 1]], axis=1)
    s = np.linalg.norm(w, axis=1) / 2.0
    return np.degrees(np.arctan2(s, c))


def rotation_error(pred, gt):
    """Mean geodesic rotation error (degrees)."""
    if len(pred) != len(gt) or len(pred) == 0:
        raise ShapeMismatch(f"pose sequences must be non-empty and equal length ({len(pred)} vs {len(gt)})")
    Rp, _ = _poses(pred)
    Rg, _ = _poses(gt)
    return float(rotation_angles(Rp, Rg).mean())


def acceleration_error(pred, gt, fps=FPS):
    """Mean norm of the difference of second finite differences, scaled to m/s^2.

    pred and gt are (M, ..., 3) series in meters with M >= 3 frames.
    """
    pred = np.asarray(pred, dtype=float)
    gt = np.asarray(gt, dtype=float)
    if pred.shape != gt.shape or pred.shape[-1] != 3:
        raise ShapeMismatch(f"expected matching (M, ..., 3) arrays, got {pred.shape} and {gt.shape}")
    if len(pred) < 3:
        raise WindowTooShort(f"acceleration needs >= 3 frames, got {len(pred)}")
    d = pred - gt
    acc = (d[2:] - 2.0 * d[1:-1] + d[:-2]) * fps ** 2
    return float(np.linalg.norm(acc, axis=-1).mean())


def interaction_field(mesh_a, mesh_b, index_b=None):
    """Distance from each vertex of mesh_a to its nearest vertex of mesh_b (meters)."""
    index_b = build_index(mesh_b) if index_b is None else index_b
    _, d = index_b.query(mesh_a.vertices)
    return d


def penetration_volume(hand_mesh, other_mesh, voxel=0.001):
    """Voxelized intersection volume (cm^3)."""
    return voxel_intersection_volume(hand_mesh, other_mesh, voxel)


def in_contact(hand_mesh, tool_mesh, threshold_mm=CONTACT_THRESHOLD_MM, voxel=0.001):
    if interaction_field(hand_mesh, tool_mesh).min() * 1000.0 < threshold_mm:
        return True
    return penetration_volume(hand_mesh, tool_mesh, voxel) > 0


def contact_ratio(samples, threshold_mm=CONTACT_THRESHOLD_MM, voxel=0.001):
    """Percent of (hand mesh, tool mesh) samples within `threshold_mm` of the tool or penetrating it."""
    if len(samples) == 0:
        raise EmptyInput("contact_ratio needs at least one sample")
    hits = sum(bool(in_contact(h, t, threshold_mm, voxel)) for h, t in samples)
    return 100.0 * hits / len(samples)


def collision_ratio(samples, voxel=0.001):
    """Percent of (hand mesh, [environment meshes]) samples with positive intersection volume."""
    if len(samples) == 0:
        raise EmptyInput("collision_ratio needs at least one sample")
    hits = 0
    for hand, env in samples:
        hits += any(voxel_intersection_volume(hand, m, voxel) > 0 for m in env)
    return 100.0 * hits / len(samples)


def frechet_distance(a, b, eps=1e-6):
    """Frechet distance between Gaussians fitted to two (n, d) feature sets."""
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[1]:
        raise ShapeMismatch(f"feature sets must be (n, d) with equal d, got {a.shape} and {b.shape}")
    if len(a) < 2 or len(b) < 2:
        raise EmptyInput("need at least 2 samples per feature set")
    d = a.shape[1]
    mu_a, mu_b = a.mean(axis=0), b.mean(axis=0)
    Sa = np.cov(a, rowvar=False).reshape(d, d) + eps * np.eye(d)
    Sb = np.cov(b, rowvar=False).reshape(d, d) + eps * np.eye(d)
    if not (np.all(np.isfinite(Sa)) and np.all(np.isfinite(Sb))):
        raise DegenerateCovariance("non-finite feature covariance")
    # tr sqrt(Sa Sb) = tr sqrt(Sa^1/2 Sb Sa^1/2), a symmetric PSD product
    w, V = linalg.eigh(Sa)
    if w.min() <= 0 or not np.all(np.isfinite(w)):
        raise DegenerateCovariance("covariance not positive definite after regularization")
    half = (V * np.sqrt(w)) @ V.T
    m = half @ Sb @ half
    ev = linalg.eigvalsh((m + m.T) / 2.0)
    if not np.all(np.isfinite(ev)):
        raise DegenerateCovariance("non-finite eigenvalues in covariance product")
    tr_sqrt = np.sqrt(np.clip(ev, 0.0, None)).sum()
    diff = mu_a - mu_b
    return float(max(diff @ diff + np.trace(Sa) + np.trace(Sb) - 2.0 * tr_sqrt, 0.0))


def load_features(path):
    """FeatureSet CSV: one row of 64 floats per sample, optional non-numeric header."""
    rows = []
    with open(path, newline="") as fh:
        for line_no, row in enumerate(csv.reader(fh), 1):
            if not row:
                continue
            try:
                rows.append([float(x) for x in row])
            except ValueError:
                if line_no == 1:
                    continue
                raise ShapeMismatch(f"{path}:{line_no}: non-numeric feature row") from None
    arr = np.array(rows, dtype=float)
    if arr.ndim != 2 or arr.shape[1] != FEATURE_DIM:
        raise ShapeMismatch(f"{path}: expected rows of {FEATURE_DIM} features, got shape {arr.shape}")
    return arr


def save_features(features, path):
    with open(path, "w", newline="") as fh:
        csv.writer(fh).writerows(np.asarray(features, dtype=float).tolist())


def write_report(report, path):
    with open(path, "w") as fh:
        json.dump(report, fh, indent=2, sort_keys=True)
        fh.write("\n")
