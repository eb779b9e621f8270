"""ROC curves, Chamfer distances and 2D line-position error."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.spatial import cKDTree

__all__ = [
    "RocCurve",
    "roc_curve",
    "chamfer_distance",
    "nearest_distances",
    "volume_points",
    "mask_points",
    "line_position_error_2d",
]


@dataclass
class RocCurve:
    thresholds: np.ndarray
    tpr: np.ndarray
    fpr: np.ndarray
    auc: float

    def rows(self):
        return list(zip(self.thresholds.tolist(), self.tpr.tolist(), self.fpr.tolist()))


def roc_curve(scores, truth) -> RocCurve:
    """ROC over all distinct score thresholds; AUC by the trapezoidal rule.

    Points are ordered by decreasing threshold, starting at ``(0, 0)`` (threshold
    ``+inf``) and ending at ``(1, 1)``. Tied scores form a single step.
    """
    s = np.asarray(scores, dtype=np.float64).ravel()
    t = np.asarray(truth).ravel().astype(bool)
    if s.shape != t.shape:
        raise ValueError("scores and truth must have the same shape")
    n_pos = int(t.sum())
    n_neg = t.size - n_pos
    if n_pos == 0 or n_neg == 0:
        raise ValueError("truth needs at least one positive and one negative")
    order = np.argsort(-s, kind="mergesort")
    s_sorted = s[order]
    t_sorted = t[order]
    tp = np.cumsum(t_sorted)
    fp = np.cumsum(~t_sorted)
    last = np.r_[np.flatnonzero(np.diff(s_sorted)), s.size - 1]
    tpr = np.r_[0.0, tp[last] / n_pos]
    fpr = np.r_[0.0, fp[last] / n_neg]
    thresholds = np.r_[np.inf, s_sorted[last]]
    auc = float(np.sum(np.diff(fpr) * (tpr[1:] + tpr[:-1]) / 2.0))
    return RocCurve(thresholds, tpr, fpr, auc)


def nearest_distances(query, ref) -> np.ndarray:
    """Exact Euclidean distance from each query point to its nearest ``ref`` point."""
    q = np.asarray(query, dtype=np.float64)
    r = np.asarray(ref, dtype=np.float64)
    if q.ndim != 2 or r.ndim != 2 or q.shape[1] != r.shape[1]:
        raise ValueError("point sets must be (N, d) arrays of equal dimension d")
    if len(r) == 0:
        raise ValueError("reference point set is empty")
    dist, _ = cKDTree(r).query(q)
    return np.asarray(dist, dtype=np.float64)


def chamfer_distance(a, b) -> float:
    """Symmetric mean Chamfer distance ``(mean_a d(a, B) + mean_b d(b, A)) / 2``."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if len(a) == 0 or len(b) == 0:
        raise ValueError("Chamfer distance needs two nonempty point sets")
    da = nearest_distances(a, b).mean()
    db = nearest_distances(b, a).mean()
    return float(0.5 * (da + db))


def volume_points(vol, threshold: float = 0.5) -> np.ndarray:
    """``(x, y, z)`` centers of voxels at or above ``threshold * max``."""
    vol = np.asarray(vol, dtype=np.float64)
    peak = vol.max()
    if peak <= 0:
        return np.zeros((0, 3))
    return np.argwhere(vol >= threshold * peak)[:, ::-1].astype(np.float64)


def mask_points(mask) -> np.ndarray:
    """``(x, y)`` centers of the true pixels of a 2D mask."""
    return np.argwhere(np.asarray(mask, dtype=bool))[:, ::-1].astype(np.float64)


def line_position_error_2d(detected, truth_map) -> float:
    """Symmetric mean nearest-pixel distance between two binary line masks, in pixels.

    ``detected`` may be a :class:`~stereotrack.features.FeatureMap2` (its
    thresholded mask is used) or a boolean image.
    """
    mask = detected.mask if hasattr(detected, "mask") else np.asarray(detected, dtype=bool)
    a = mask_points(mask)
    b = mask_points(truth_map)
    if len(a) == 0 or len(b) == 0:
        raise ValueError("line masks must be nonempty")
    return chamfer_distance(a, b)
