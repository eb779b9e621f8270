"""Per-frame tracking pipeline and the two prior strategies for sequences.

A frame is processed in nine stages::

    project     m_v = forward_project(prior_volume, v)
    register2d  phi_v = register_2d(m_v, f_noisy_v)
    warp2d      f_moved_v = warp_image(m_v, phi_v)
    detect      feat_v = detect_features_2d(f_moved_v)
    backproject V_bp = make_bp_evidence(feat_0, feat_1)
    rasterize   V_prior = rasterize(prior_lines)
    register3d  psi = register_3d_prior(V_prior, V_bp)
    warp3d      V_feature = warp_volume(V_prior, psi)
    extract     lines from V_feature

Frame indices are 0-based; frame 0 is the starting frame whose volume and
lines are known.
"""

from __future__ import annotations

import enum
import hashlib
import logging
import time
from dataclasses import asdict, dataclass, field
from typing import NamedTuple

import numpy as np

from .features import FeatureMap2, FeatureVolume, detect_features_2d, extract_polylines
from .grid import Polyline3, interp_linear, rasterize_polyline, rasterize_polylines, warp_image, warp_volume
from .metrics import chamfer_distance, line_position_error_2d, roc_curve, volume_points
from .projector import StereoGeometry, forward_project, make_bp_evidence, project_lines_mask
from .registration import RegConfig, register_2d, register_3d_prior

log = logging.getLogger(__name__)

__all__ = [
    "STAGES",
    "Strategy",
    "StageError",
    "TrackConfig",
    "FrameDiagnostics",
    "FrameOutput",
    "TrackingRun",
    "track_frame",
    "track_sequence",
    "frame_metrics",
    "array_digest",
]

STAGES = ("project", "register2d", "warp2d", "detect", "backproject",
          "rasterize", "register3d", "warp3d", "extract")


class Strategy(str, enum.Enum):
    START_FRAME = "start_frame"
    CHAINED = "chained"


class StageError(RuntimeError):
    """A pipeline stage failed; ``stage`` names it and ``cause`` is the original error."""

    def __init__(self, stage: str, cause: BaseException):
        super().__init__(f"stage {stage!r} failed: {cause}")
        self.stage = stage
        self.cause = cause


def _reg2d_default():
    return RegConfig(lam=0.001, grad_sigma=2.0)


def _reg3d_default():
    return RegConfig(similarity="ssd", lam=0.03)


@dataclass(frozen=True)
class TrackConfig:
    reg2d: RegConfig = field(default_factory=_reg2d_default)
    reg3d: RegConfig = field(default_factory=_reg3d_default)
    # None: the prior lines' radius projected onto the detector
    marker_radius_px: float | None = None
    n_orientations: int = 12
    elongation: float = 3.0
    detect_threshold: float | None = None
    # back-project thresholded masks; False uses the soft scores
    binarize: bool = True
    filtered: bool = False
    extract_threshold: float = 0.5

    def __post_init__(self):
        if self.marker_radius_px is not None and self.marker_radius_px <= 0:
            raise ValueError("marker_radius_px must be positive")
        if not 0 < self.extract_threshold <= 1:
            raise ValueError("extract_threshold must be in (0, 1]")

    def to_dict(self):
        d = asdict(self)
        d["reg2d"] = self.reg2d.to_dict()
        d["reg3d"] = self.reg3d.to_dict()
        return d


@dataclass
class FrameDiagnostics:
    moving: list
    fields2d: list
    moved: list
    features: list
    evidence: np.ndarray
    prior: np.ndarray
    field3d: np.ndarray
    checksums: dict
    timings: dict


class FrameOutput(NamedTuple):
    lines: list
    feature: FeatureVolume
    diagnostics: FrameDiagnostics


def array_digest(*arrays) -> str:
    """sha256 over shapes and little-endian float64 bytes of ``arrays``."""
    h = hashlib.sha256()
    for a in arrays:
        a = np.ascontiguousarray(a, dtype="<f8")
        h.update(repr(a.shape).encode())
        h.update(a.tobytes())
    return h.hexdigest()


def _marker_radius(lines, geom: StereoGeometry, cfg: TrackConfig) -> float:
    if cfg.marker_radius_px is not None:
        return cfg.marker_radius_px
    r = max((ln.radius for ln in lines), default=1.0)
    return max(r * geom.voxel_pitch * geom.magnification / geom.pixel_pitch, 0.5)


def _extract_line(feature_i, prior_line: Polyline3, psi, threshold):
    """Polyline of one warped prior line; falls back to pushing the prior points
    through ``psi`` when the warped raster has no usable component."""
    found = extract_polylines(feature_i, threshold=threshold, radius=prior_line.radius)
    if found:
        return found[0]
    return Polyline3(_push_forward(prior_line.points, psi), radius=prior_line.radius, meta={"fallback": True})


def _push_forward(points, psi, iters: int = 20):
    """Solve ``x + psi(x) = p`` for each point ``p`` by fixed-point iteration."""
    p = np.asarray(points, dtype=np.float64)
    x = p.copy()
    for _ in range(iters):
        coords = [x[:, 2], x[:, 1], x[:, 0]]
        disp = np.stack([interp_linear(psi[c], coords) for c in range(3)], axis=1)
        x = p - disp
    return x


def track_frame(prior_volume, prior_lines, noisy_pair, geom: StereoGeometry,
                cfg: TrackConfig | None = None, moving_pair=None) -> FrameOutput:
    """Estimate the fiducial lines of one frame from its noisy stereo pair.

    ``moving_pair`` replaces the projections of ``prior_volume`` as the 2D
    moving images (used by the chained strategy). Any stage failure is raised
    as :class:`StageError` naming the stage.
    """
    cfg = cfg or TrackConfig()
    prior_volume = np.asarray(prior_volume, dtype=np.float64)
    dims = prior_volume.shape
    if len(noisy_pair) != 2:
        raise ValueError("noisy_pair must hold the images of views 0 and 1")
    if not prior_lines:
        raise ValueError("tracking needs at least one prior line")
    sums: dict = {}
    times: dict = {}
    stage = STAGES[0]

    def done(name, t0, *arrays):
        times[name] = time.perf_counter() - t0
        sums[name] = array_digest(*arrays)

    try:
        t0 = time.perf_counter()
        if moving_pair is None:
            geom.check_volume(dims)
            moving = [forward_project(prior_volume, geom, v) for v in (0, 1)]
        else:
            moving = [np.asarray(m, dtype=np.float64) for m in moving_pair]
        done(stage, t0, *moving)

        stage = "register2d"
        t0 = time.perf_counter()
        regs = [register_2d(moving[v], noisy_pair[v], cfg.reg2d) for v in (0, 1)]
        fields2d = [r.field for r in regs]
        done(stage, t0, *fields2d)

        stage = "warp2d"
        t0 = time.perf_counter()
        moved = [warp_image(moving[v], fields2d[v]) for v in (0, 1)]
        done(stage, t0, *moved)

        stage = "detect"
        t0 = time.perf_counter()
        radius_px = _marker_radius(prior_lines, geom, cfg)
        feats = [detect_features_2d(img, radius_px, cfg.n_orientations, cfg.elongation, cfg.detect_threshold)
                 for img in moved]
        done(stage, t0, *[f.score for f in feats], [f.threshold for f in feats])

        stage = "backproject"
        t0 = time.perf_counter()
        maps = [f.mask.astype(np.float64) if cfg.binarize else f.score for f in feats]
        evidence = make_bp_evidence(maps[0], maps[1], geom, dims, filtered=cfg.filtered)
        done(stage, t0, evidence)

        stage = "rasterize"
        t0 = time.perf_counter()
        per_line = [rasterize_polyline(ln, dims) for ln in prior_lines]
        v_prior = np.max(per_line, axis=0)
        done(stage, t0, v_prior)

        stage = "register3d"
        t0 = time.perf_counter()
        psi = register_3d_prior(v_prior, evidence, cfg.reg3d).field
        done(stage, t0, psi)

        stage = "warp3d"
        t0 = time.perf_counter()
        v_feature = np.clip(warp_volume(v_prior, psi), 0.0, 1.0)
        done(stage, t0, v_feature)

        stage = "extract"
        t0 = time.perf_counter()
        # one polyline per prior line keeps identities across frames
        lines = [_extract_line(warp_volume(r, psi), ln, psi, cfg.extract_threshold)
                 for r, ln in zip(per_line, prior_lines)]
        done(stage, t0, *[ln.points for ln in lines])
    except StageError:
        raise
    except Exception as exc:
        raise StageError(stage, exc) from exc

    diag = FrameDiagnostics(moving, fields2d, moved, feats, evidence, v_prior, psi, sums, times)
    feature = FeatureVolume(v_feature, lines, {"evidence_empty": not evidence.any()})
    return FrameOutput(lines, feature, diag)


@dataclass
class TrackingRun:
    """A noisy stereo sequence to track and, once tracked, its per-frame outputs.

    ``frames[k]`` is the noisy pair of frame ``k``; frame 0 is the starting
    frame described by ``start_volume`` and ``start_lines``. ``truth_lines``
    (per frame, optional) enables the metrics. ``outputs[k]`` and
    ``metrics[k]`` are filled for ``k >= 1``; a failed frame has output
    ``None`` and its error in ``errors[k]``.
    """

    frames: list
    start_volume: np.ndarray
    start_lines: list
    strategy: Strategy = Strategy.START_FRAME
    truth_lines: list | None = None
    outputs: dict = field(default_factory=dict)
    metrics: dict = field(default_factory=dict)
    errors: dict = field(default_factory=dict)

    def __post_init__(self):
        if len(self.frames) < 2:
            raise ValueError("a tracking run needs at least 2 frames")
        self.strategy = Strategy(self.strategy)
        if self.truth_lines is not None and len(self.truth_lines) != len(self.frames):
            raise ValueError("truth_lines must give one line list per frame")

    @property
    def n_frames(self) -> int:
        return len(self.frames)


def frame_metrics(output: FrameOutput, truth_lines, geom: StereoGeometry) -> dict:
    """Chamfer distance of the feature volume and 2D detection scores against ground truth."""
    dims = output.feature.score.shape
    truth_vol = rasterize_polylines(truth_lines, dims)
    est_pts = volume_points(output.feature.score)
    row = {"chamfer": chamfer_distance(est_pts, volume_points(truth_vol)) if len(est_pts) else float("inf")}
    for v, feat in enumerate(output.diagnostics.features):
        truth_map = project_lines_mask(truth_lines, geom, v, dims) > 0
        row[f"auc{v}"] = roc_curve(feat.score, truth_map).auc if truth_map.any() and not truth_map.all() else float("nan")
        row[f"line_error{v}"] = line_position_error_2d(feat, truth_map) if feat.mask.any() else float("inf")
    row["auc"] = 0.5 * (row["auc0"] + row["auc1"])
    row["line_error"] = 0.5 * (row["line_error0"] + row["line_error1"])
    return row


def _prior_for(run: TrackingRun, k: int):
    """(prior lines, 2D moving pair or None) for frame ``k``."""
    if run.strategy is Strategy.START_FRAME or k == 1:
        return run.start_lines, None
    # chained: the latest successfully tracked frame before k
    for j in range(k - 1, 0, -1):
        out = run.outputs.get(j)
        if out is not None:
            return out.lines, out.diagnostics.moved
    return run.start_lines, None


def track_sequence(run: TrackingRun, geom: StereoGeometry, cfg: TrackConfig | None = None) -> TrackingRun:
    """Track frames ``1 .. N-1`` of ``run`` in order, filling outputs and metrics.

    With the start-frame strategy every frame uses the starting volume and
    lines as its prior. With the chained strategy frame ``k`` uses frame
    ``k-1``'s estimated lines as 3D prior and its moved images as 2D moving
    images. A failed frame is recorded and the run continues.
    """
    cfg = cfg or TrackConfig()
    for k in range(1, run.n_frames):
        prior_lines, moving = _prior_for(run, k)
        try:
            out = track_frame(run.start_volume, prior_lines, run.frames[k], geom, cfg, moving_pair=moving)
        except StageError as exc:
            log.warning("frame %d: %s", k, exc)
            run.outputs[k] = None
            run.errors[k] = str(exc)
            run.metrics[k] = {"frame": k, "error": str(exc)}
            continue
        row = {"frame": k}
        if run.truth_lines is not None:
            row.update(frame_metrics(out, run.truth_lines[k], geom))
        row["time_s"] = float(sum(out.diagnostics.timings.values()))
        run.outputs[k] = out
        run.metrics[k] = row
    return run
