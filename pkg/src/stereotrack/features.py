"""Line-fiducial detection in 2D and prior-free 3D mapping."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage

from .grid import Polyline3
from .projector import make_bp_evidence

log = logging.getLogger(__name__)

__all__ = [
    "FeatureMap2",
    "FeatureVolume",
    "line_kernel",
    "ridge_response",
    "otsu_threshold",
    "detect_features_2d",
    "extract_polylines",
    "map_3d_no_prior",
]


@dataclass
class FeatureMap2:
    """Soft line score in ``[0, 1]`` with its binarization threshold."""

    score: np.ndarray
    threshold: float = 0.5

    @property
    def mask(self) -> np.ndarray:
        return self.score >= self.threshold if self.score.any() else np.zeros(self.score.shape, bool)


@dataclass
class FeatureVolume:
    score: np.ndarray
    lines: list = field(default_factory=list)
    meta: dict = field(default_factory=dict)


def line_kernel(sigma: float, angle: float, elongation: float = 3.0) -> np.ndarray:
    """Zero-mean oriented matched filter for a bright line.

    Negative second derivative of a Gaussian across the line direction,
    times a Gaussian of width ``elongation * sigma`` along it. ``angle`` is the
    line direction in radians, measured from the image x axis.
    """
    s_along = elongation * sigma
    r = int(math.ceil(3.0 * max(sigma, s_along)))
    y, x = np.mgrid[-r:r + 1, -r:r + 1].astype(np.float64)
    along = x * math.cos(angle) + y * math.sin(angle)
    across = -x * math.sin(angle) + y * math.cos(angle)
    g_across = np.exp(-0.5 * (across / sigma) ** 2)
    k = (1.0 - (across / sigma) ** 2) * g_across * np.exp(-0.5 * (along / s_along) ** 2)
    k -= k.mean()
    return k / np.abs(k).sum()


def ridge_response(img, sigma: float, n_orientations: int = 12, elongation: float = 3.0) -> np.ndarray:
    """Per-pixel maximum matched-filter response over orientations (unnormalized)."""
    img = np.asarray(img, dtype=np.float64)
    best = np.full(img.shape, -np.inf)
    for i in range(n_orientations):
        k = line_kernel(sigma, np.pi * i / n_orientations, elongation)
        np.maximum(best, ndimage.convolve(img, k, mode="nearest"), out=best)
    return best


def otsu_threshold(values, bins: int = 256) -> float:
    """Threshold maximizing between-class variance of ``values``."""
    v = np.asarray(values, dtype=np.float64).ravel()
    lo, hi = v.min(), v.max()
    if hi <= lo:
        return float(hi)
    hist, edges = np.histogram(v, bins=bins, range=(lo, hi))
    centers = 0.5 * (edges[:-1] + edges[1:])
    w0 = np.cumsum(hist)
    w1 = w0[-1] - w0
    m0 = np.cumsum(hist * centers)
    mu0 = m0 / np.maximum(w0, 1)
    mu1 = (m0[-1] - m0) / np.maximum(w1, 1)
    between = w0 * w1 * (mu0 - mu1) ** 2
    k = int(np.argmax(between[:-1]))
    return float(edges[k + 1])


def detect_features_2d(
    img,
    marker_radius_px: float,
    n_orientations: int = 12,
    elongation: float = 3.0,
    threshold: float | None = None,
) -> FeatureMap2:
    """Detect bright line markers with an oriented second-derivative filter bank.

    The response is the maximum over ``n_orientations`` kernels with
    ``sigma = marker_radius_px``; negative responses are clipped and the map
    is scaled to ``[0, 1]``. The threshold defaults to Otsu's on the positive
    responses.
    """
    img = np.asarray(img, dtype=np.float64)
    if not np.all(np.isfinite(img)):
        raise ValueError("image must be finite")
    if marker_radius_px <= 0:
        raise ValueError("marker_radius_px must be positive")
    if n_orientations < 8:
        raise ValueError("use at least 8 orientations")
    resp = np.clip(ridge_response(img, marker_radius_px, n_orientations, elongation), 0.0, None)
    peak = resp.max()
    # numerical residue of a flat image is not a detection
    if peak <= 1e-9 * max(1.0, np.abs(img).max()):
        return FeatureMap2(np.zeros(img.shape), 1.0 if threshold is None else threshold)
    score = resp / peak
    if threshold is None:
        threshold = otsu_threshold(score[score > 0])
    return FeatureMap2(score, float(threshold))


def extract_polylines(fv, expected_count: int | None = None, threshold: float = 0.5,
                      min_voxels: int = 5, radius: float = 1.0, bin_width: float = 1.0) -> list:
    """Convert a feature volume into polylines, one per connected component.

    The volume is binarized at ``threshold * max`` and labeled with
    26-connectivity. Each component's voxels are ordered along its principal
    axis, averaged in bins of ``bin_width`` voxels and smoothed with a
    three-point moving average. Components under ``min_voxels`` are dropped.
    """
    score = fv.score if isinstance(fv, FeatureVolume) else np.asarray(fv, dtype=np.float64)
    peak = score.max() if score.size else 0.0
    if peak <= 0:
        return []
    labels, n = ndimage.label(score >= threshold * peak, structure=np.ones((3, 3, 3)))
    lines = []
    for lab in range(1, n + 1):
        zyx = np.argwhere(labels == lab)
        if len(zyx) < min_voxels:
            continue
        pts = zyx[:, ::-1].astype(np.float64)
        w = score[labels == lab]
        mean = pts.mean(axis=0)
        _, _, vt = np.linalg.svd(pts - mean, full_matrices=False)
        s = (pts - mean) @ vt[0]
        edges = np.arange(s.min(), s.max() + bin_width, bin_width)
        which = np.clip(np.digitize(s, edges) - 1, 0, max(len(edges) - 2, 0))
        centroids = []
        for b in np.unique(which):
            sel = which == b
            centroids.append(np.average(pts[sel], axis=0, weights=w[sel]))
        c = np.array(centroids)
        if len(c) >= 3:
            smooth = c.copy()
            smooth[1:-1] = (c[:-2] + c[1:-1] + c[2:]) / 3.0
            c = smooth
        keep = np.concatenate([[True], np.linalg.norm(np.diff(c, axis=0), axis=1) > 1e-9])
        c = c[keep]
        if len(c) < 2:
            continue
        lines.append(Polyline3(c, radius=radius, meta={"voxels": len(zyx)}))
    lines.sort(key=lambda ln: -ln.meta["voxels"])
    if expected_count is not None and len(lines) < expected_count:
        log.warning("extracted %d polylines, expected %d", len(lines), expected_count)
    return lines


def map_3d_no_prior(feat0, feat1, geom, dims, expected_count: int | None = None,
                    threshold: float = 0.5, radius: float = 1.0) -> FeatureVolume:
    """Prior-free 3D mapping: intersect the two views' back-projected feature maps.

    Works for a few well separated lines; with many lines the ray cones of
    different lines intersect and produce ghost segments.
    """
    masks = []
    for feat in (feat0, feat1):
        masks.append(feat.mask.astype(np.float64) if isinstance(feat, FeatureMap2) else np.asarray(feat, dtype=np.float64))
    ev = make_bp_evidence(masks[0], masks[1], geom, dims)
    if not ev.any():
        raise ValueError("no intersection: evidence volume is empty")
    binary = np.where(ev >= threshold, ev, 0.0)
    lines = extract_polylines(binary, expected_count, radius=radius)
    return FeatureVolume(binary, lines, {"evidence": ev})
