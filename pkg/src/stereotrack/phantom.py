"""Synthetic phantoms: line fiducials in an ellipsoid background, smooth
deformation sequences and Poisson projection noise."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass

import numpy as np
from scipy.spatial.transform import Rotation

from . import streams
from .grid import Polyline3, gaussian_smooth, point_segment_distance, rasterize_polylines, warp_volume

__all__ = [
    "PhantomSpec",
    "DeformationSpec",
    "Frame",
    "gen_start_volume",
    "gen_smooth_field",
    "gen_line_trig_deformation",
    "apply_deformation_sequence",
    "add_poisson_noise",
    "field_max_gradient",
]

MAX_ATTEMPTS = 10_000


@dataclass(frozen=True)
class PhantomSpec:
    dims: int = 64
    n_lines: int = 5
    n_ellipsoids: int = 10
    line_radius: float = 1.0
    line_intensity: float = 3.0
    ellipsoid_intensity: tuple = (0.2, 0.5)
    # side of the central cube holding line endpoints and ellipsoid centers, as a fraction of dims
    content_fraction: float = 0.5
    # minimum elevation of line directions above the horizontal plane, degrees
    min_elevation: float = 35.0
    seed: int = 0

    def __post_init__(self):
        if self.dims < 16:
            raise ValueError("dims must be at least 16")
        if self.n_lines < 0 or self.n_ellipsoids < 0:
            raise ValueError("counts must be non-negative")
        lo, hi = self.ellipsoid_intensity
        if not 0 <= lo <= hi:
            raise ValueError("ellipsoid intensity range must satisfy 0 <= lo <= hi")
        if self.n_lines and hi >= self.line_intensity:
            raise ValueError("line intensity must exceed every ellipsoid intensity")
        if not 0 < self.content_fraction <= 1:
            raise ValueError("content_fraction must be in (0, 1]")
        object.__setattr__(self, "ellipsoid_intensity", tuple(float(v) for v in self.ellipsoid_intensity))

    def to_dict(self):
        d = asdict(self)
        d["ellipsoid_intensity"] = list(self.ellipsoid_intensity)
        return d


@dataclass(frozen=True)
class DeformationSpec:
    sigma: float = 6.0
    # largest background displacement per step, voxels
    amplitude: float = 2.0
    magnitude_range: tuple = (3.0, 6.0)
    n_frames: int = 2
    # reuse each line's distortion mode in every step so the deformation accumulates
    coherent: bool = False
    seed: int = 0

    def __post_init__(self):
        if self.sigma <= 0:
            raise ValueError("sigma must be positive")
        if self.amplitude < 0:
            raise ValueError("amplitude must be non-negative")
        lo, hi = self.magnitude_range
        if not 0 <= lo <= hi:
            raise ValueError("magnitude range must satisfy 0 <= lo <= hi")
        if self.n_frames < 2:
            raise ValueError("n_frames must be at least 2")
        object.__setattr__(self, "magnitude_range", tuple(float(v) for v in self.magnitude_range))

    def check_dims(self, dims: int):
        if self.magnitude_range[1] > dims / 4:
            raise ValueError(f"line distortion magnitude exceeds dims/4 = {dims / 4:g}")

    def to_dict(self):
        d = asdict(self)
        d["magnitude_range"] = list(self.magnitude_range)
        return d


@dataclass
class Frame:
    volume: np.ndarray
    lines: list
    background: np.ndarray


def _content_box(spec: PhantomSpec):
    c = (spec.dims - 1) / 2.0
    half = spec.content_fraction * spec.dims / 2.0
    return c - half, c + half


def _segment_distance(a0, a1, b0, b1) -> float:
    pts = np.linspace(a0, a1, 64)
    return float(point_segment_distance(pts, b0, b1).min())


def _draw_line(g, spec: PhantomSpec):
    lo, hi = _content_box(spec)
    side = hi - lo
    for _ in range(100):
        a = g.uniform(lo, hi, size=3)
        b = g.uniform(lo, hi, size=3)
        d = b - a
        n = np.linalg.norm(d)
        if n < 0.6 * side:
            continue
        if math.degrees(math.asin(abs(d[2]) / n)) < spec.min_elevation:
            continue
        return a, b
    return None


def _add_ellipsoid(vol, g, spec: PhantomSpec):
    lo, hi = _content_box(spec)
    center = g.uniform(lo, hi, size=3)
    axes = g.uniform(spec.dims / 16.0, spec.dims / 4.0, size=3)
    rot = Rotation.random(random_state=g).as_matrix()
    value = g.uniform(*spec.ellipsoid_intensity)
    r = axes.max()
    a = np.maximum(np.floor(center - r), 0).astype(int)
    b = np.minimum(np.ceil(center + r), spec.dims - 1).astype(int)
    zz, yy, xx = np.meshgrid(
        np.arange(a[2], b[2] + 1), np.arange(a[1], b[1] + 1), np.arange(a[0], b[0] + 1), indexing="ij"
    )
    rel = np.stack([xx - center[0], yy - center[1], zz - center[2]], axis=-1)
    local = rel @ rot  # coordinates in the ellipsoid frame
    inside = np.sum((local / axes) ** 2, axis=-1) <= 1.0
    vol[a[2]:b[2] + 1, a[1]:b[1] + 1, a[0]:b[0] + 1] += inside * value


def gen_start_volume(spec: PhantomSpec):
    """Random starting volume and its straight line fiducials.

    The volume is a sum of solid ellipsoids plus ``line_intensity`` times the
    rasterized lines. Lines are drawn inside the central content cube and kept
    at least ``4 * line_radius`` apart.
    """
    shape = (spec.dims,) * 3
    vol = np.zeros(shape)
    if spec.n_ellipsoids:
        g = streams.rng(spec.seed, "ellipsoids")
        for _ in range(spec.n_ellipsoids):
            _add_ellipsoid(vol, g, spec)

    g = streams.rng(spec.seed, "lines")
    segments = []
    attempts = 0
    while len(segments) < spec.n_lines:
        attempts += 1
        if attempts > MAX_ATTEMPTS:
            raise RuntimeError(
                f"could not place {spec.n_lines} separated lines in {MAX_ATTEMPTS} attempts"
            )
        seg = _draw_line(g, spec)
        if seg is None:
            continue
        sep = 4.0 * spec.line_radius
        if all(_segment_distance(*seg, *other) >= sep for other in segments):
            segments.append(seg)
    lines = [Polyline3(np.array(seg), radius=spec.line_radius) for seg in segments]
    if lines:
        vol += spec.line_intensity * rasterize_polylines(lines, shape)
    return vol, lines


def field_max_gradient(phi) -> float:
    """Largest absolute forward difference of any field component along any axis."""
    phi = np.asarray(phi)
    worst = 0.0
    for comp in phi:
        for ax in range(comp.ndim):
            if comp.shape[ax] > 1:
                worst = max(worst, float(np.abs(np.diff(comp, axis=ax)).max()))
    return worst


def gen_smooth_field(dims, sigma: float, amplitude: float, seed: int, max_attempts: int = 20):
    """Random smooth displacement field with maximum vector norm ``amplitude``.

    Each component is i.i.d. standard normal per node, Gaussian smoothed with
    ``sigma`` and the whole field rescaled. The noise is drawn on a grid padded
    by the kernel radius and cropped after smoothing, so the field statistics
    do not change near the borders. Fields whose forward differences reach
    1 voxel (folding) are redrawn.
    """
    if sigma <= 0:
        raise ValueError("sigma must be positive")
    if amplitude < 0:
        raise ValueError("amplitude must be non-negative")
    dims = tuple(int(n) for n in dims)
    if amplitude == 0:
        return np.zeros((len(dims),) + dims)
    pad = int(math.ceil(3.0 * sigma))
    crop = tuple(slice(pad, pad + n) for n in dims)
    for attempt in range(max_attempts):
        g = streams.rng(seed, "field", attempt)
        raw = g.standard_normal((len(dims),) + tuple(n + 2 * pad for n in dims))
        phi = gaussian_smooth(raw, sigma, vector=True)[(slice(None),) + crop]
        phi *= amplitude / np.sqrt((phi**2).sum(axis=0)).max()
        if field_max_gradient(phi) < 1.0:
            return phi
    raise RuntimeError("could not draw a fold-free field; lower amplitude or raise sigma")


def _transverse_frame(chord):
    t = chord / np.linalg.norm(chord)
    helper = np.array([1.0, 0.0, 0.0]) if abs(t[0]) < 0.9 else np.array([0.0, 1.0, 0.0])
    n1 = np.cross(t, helper)
    n1 /= np.linalg.norm(n1)
    n2 = np.cross(t, n1)
    return n1, n2


def gen_line_trig_deformation(line: Polyline3, magnitude: float, seed: int, spacing: float = 0.5) -> Polyline3:
    """Smooth sinusoidal distortion of a line with both endpoints held fixed.

    The line is resampled to ``spacing`` voxels. Each interior point moves
    perpendicular to the endpoint chord by ``a_j * sin(k_j * pi * t)`` along
    two transverse axes, where ``t`` is the arc parameter, ``k_j`` is 1 or 2 and
    the transverse axes are rotated by a random angle. The displacement is
    scaled so its largest norm equals ``magnitude``.
    """
    if magnitude < 0:
        raise ValueError("magnitude must be non-negative")
    pts = line.resample(spacing)
    seg = np.linalg.norm(np.diff(pts, axis=0), axis=1)
    s = np.concatenate([[0.0], np.cumsum(seg)])
    t = s / s[-1]
    chord = pts[-1] - pts[0]
    if magnitude == 0 or np.linalg.norm(chord) == 0:
        return Polyline3(pts, radius=line.radius)

    g = streams.rng(seed, "line-trig")
    k = g.integers(1, 3, size=2)
    amp = g.uniform(0.25, 1.0, size=2) * g.choice([-1.0, 1.0], size=2)
    psi = g.uniform(0.0, 2.0 * np.pi)
    n1, n2 = _transverse_frame(chord)
    a1 = math.cos(psi) * n1 + math.sin(psi) * n2
    a2 = -math.sin(psi) * n1 + math.cos(psi) * n2
    disp = (amp[0] * np.sin(k[0] * np.pi * t))[:, None] * a1 + (amp[1] * np.sin(k[1] * np.pi * t))[:, None] * a2
    disp[0] = 0.0
    disp[-1] = 0.0
    peak = np.linalg.norm(disp, axis=1).max()
    out = pts + disp * (magnitude / peak)
    out[0] = pts[0]
    out[-1] = pts[-1]
    return Polyline3(out, radius=line.radius)


def _inside(line: Polyline3, dims: int) -> bool:
    margin = line.radius + 1.0
    return bool(np.all(line.points >= margin) and np.all(line.points <= dims - 1 - margin))


def apply_deformation_sequence(start, lines, dspec: DeformationSpec, line_intensity: float = 3.0):
    """Deform a starting phantom frame by frame.

    Frame ``i`` warps frame ``i-1``'s ellipsoid background with a fresh smooth
    field and re-distorts every line. Returns ``dspec.n_frames`` :class:`Frame`
    records, the first being the starting state.
    """
    start = np.asarray(start, dtype=np.float64)
    dims = start.shape
    n = dims[0]
    dspec.check_dims(n)
    background = start - line_intensity * rasterize_polylines(lines, dims) if lines else start.copy()
    frames = [Frame(start.copy(), list(lines), background)]
    lo, hi = dspec.magnitude_range
    for i in range(1, dspec.n_frames):
        phi = gen_smooth_field(dims, dspec.sigma, dspec.amplitude, streams.derive_seed(dspec.seed, "bg", i))
        background = warp_volume(frames[-1].background, phi) if dspec.amplitude > 0 else frames[-1].background.copy()
        new_lines = []
        for j, line in enumerate(frames[-1].lines):
            for attempt in range(100):
                g = streams.rng(dspec.seed, "magnitude", i, j, attempt)
                mag = g.uniform(lo, hi)
                mode_key = (j, attempt) if dspec.coherent else (i, j, attempt)
                cand = gen_line_trig_deformation(line, mag, streams.derive_seed(dspec.seed, "mode", *mode_key))
                if _inside(cand, n):
                    new_lines.append(cand)
                    break
            else:
                raise RuntimeError(f"line {j} left the volume in frame {i} after 100 retries")
        vol = background + line_intensity * rasterize_polylines(new_lines, dims) if new_lines else background.copy()
        frames.append(Frame(vol, new_lines, background))
    return frames


def add_poisson_noise(img, scale: float, seed: int):
    """``Poisson(img * scale) / scale`` per pixel, from the ``noise`` stream of ``seed``."""
    img = np.asarray(img, dtype=np.float64)
    if scale <= 0:
        raise ValueError("scale must be positive")
    if np.any(img < 0):
        raise ValueError("Poisson noise needs non-negative pixel values")
    g = streams.rng(seed, "noise")
    return g.poisson(img * scale) / scale
