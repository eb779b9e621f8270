"""Two-view cone-beam projection and back-projection.

The rotation axis is the volume's z axis through its center. For a view at
angle ``theta`` the central ray points along ``(sin theta, cos theta, 0)``,
the detector's column axis ``u`` along ``(cos theta, -sin theta, 0)`` and its
row axis ``v`` along ``+z``. Lengths in :class:`StereoGeometry` are physical
units; ``voxel_pitch`` converts them to voxel units and scales line integrals.
"""

from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass

import numpy as np

from .grid import interp_linear, rasterize_path

log = logging.getLogger(__name__)

__all__ = [
    "StereoGeometry",
    "forward_project",
    "back_project",
    "make_bp_evidence",
    "project_point",
    "project_lines_mask",
    "ramp_kernel",
]

_CHUNK = 1 << 18


@dataclass(frozen=True)
class StereoGeometry:
    source_object_distance: float = 128.0
    object_detector_distance: float = 128.0
    detector_width: int = 256
    detector_height: int = 256
    pixel_pitch: float = 1.0
    view_angles: tuple = (-30.0, 30.0)
    voxel_pitch: float = 1.0
    step: float = 0.5

    def __post_init__(self):
        if self.source_object_distance <= 0 or self.object_detector_distance <= 0:
            raise ValueError("source/detector distances must be positive")
        if len(self.view_angles) != 2:
            raise ValueError("stereo geometry needs exactly 2 view angles")
        if self.pixel_pitch <= 0 or self.voxel_pitch <= 0:
            raise ValueError("pitches must be positive")
        if not 0 < self.step <= 0.5:
            raise ValueError("ray-marching step must be in (0, 0.5] voxels")
        object.__setattr__(self, "view_angles", tuple(float(a) for a in self.view_angles))

    @classmethod
    def desk(cls, dims: int = 64) -> "StereoGeometry":
        """Reduced-size geometry with magnification 2 and the full-size cone angle.

        The physical object matches a 256-voxel volume, so line integrals keep
        the magnitudes that the noise scales were defined for.
        """
        vp = 256.0 / dims
        return cls(
            source_object_distance=dims * vp,
            object_detector_distance=dims * vp,
            detector_width=dims,
            detector_height=dims,
            pixel_pitch=2.0 * vp,
            voxel_pitch=vp,
        )

    @classmethod
    def paper(cls) -> "StereoGeometry":
        return cls()

    @property
    def magnification(self) -> float:
        return (self.source_object_distance + self.object_detector_distance) / self.source_object_distance

    @property
    def detector_shape(self):
        return (self.detector_height, self.detector_width)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["view_angles"] = list(self.view_angles)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "StereoGeometry":
        return cls(**{**d, "view_angles": tuple(d.get("view_angles", (-30.0, 30.0)))})

    def frame(self, view: int, dims):
        """Source, detector center and unit vectors for ``view`` in voxel coordinates.

        ``dims`` is the volume shape ``(nz, ny, nx)``.
        """
        if view not in (0, 1):
            raise ValueError(f"view must be 0 or 1, got {view}")
        nz, ny, nx = dims
        center = np.array([(nx - 1) / 2.0, (ny - 1) / 2.0, (nz - 1) / 2.0])
        th = math.radians(self.view_angles[view])
        e_r = np.array([math.sin(th), math.cos(th), 0.0])
        e_u = np.array([math.cos(th), -math.sin(th), 0.0])
        e_v = np.array([0.0, 0.0, 1.0])
        sod = self.source_object_distance / self.voxel_pitch
        odd = self.object_detector_distance / self.voxel_pitch
        src = center - sod * e_r
        det = center + odd * e_r
        pitch = self.pixel_pitch / self.voxel_pitch
        return src, det, e_r, e_u, e_v, pitch

    def check_volume(self, dims):
        """Raise if a source lies inside the volume's rotation cylinder."""
        nz, ny, nx = dims
        radius = min(nx, ny) / 2.0
        if self.source_object_distance / self.voxel_pitch < radius:
            raise ValueError(
                "degenerate geometry: source lies inside the volume "
                f"(SOD {self.source_object_distance / self.voxel_pitch:g} voxels < radius {radius:g})"
            )


def project_point(geom: StereoGeometry, view: int, dims, pts):
    """Detector coordinates ``(u, v)`` (column, row; pixels) of 3D points ``(…, 3)``.

    Also returns the source distance along the central ray of each point.
    """
    src, det, e_r, e_u, e_v, pitch = geom.frame(view, dims)
    d = np.asarray(pts, dtype=np.float64) - src
    depth = d @ e_r
    sdd = (det - src) @ e_r
    hit = src + (sdd / depth)[..., None] * d
    u = (hit - det) @ e_u / pitch + (geom.detector_width - 1) / 2.0
    v = (hit - det) @ e_v / pitch + (geom.detector_height - 1) / 2.0
    return u, v, depth


def project_lines_mask(lines, geom: StereoGeometry, view: int, dims, spacing: float = 0.5) -> np.ndarray:
    """Ground-truth line map of one view: detector pixels within the projected
    marker radius of each projected centerline.

    The radius is scaled by the isocenter magnification and is at least half a
    pixel so that every line stays connected.
    """
    img = np.zeros(geom.detector_shape)
    for line in lines:
        u, v, _ = project_point(geom, view, dims, line.resample(spacing))
        r_px = line.radius * geom.voxel_pitch * geom.magnification / geom.pixel_pitch
        np.maximum(img, rasterize_path(np.stack([u, v], axis=1), max(r_px, 0.5), img.shape), out=img)
    return img


def _ray_samples(geom, view, dims, rows):
    """Yield ``(pixel_index, sample_points, step_lengths)`` chunks for detector ``rows``.

    Rays run from the source to each pixel center; samples are midpoints of
    equal sub-steps (at most ``geom.step`` voxels) between the box entry and exit.
    """
    src, det, _e_r, e_u, e_v, pitch = geom.frame(view, dims)
    nz, ny, nx = dims
    w, h = geom.detector_width, geom.detector_height
    lo = np.array([-0.5, -0.5, -0.5])
    hi = np.array([nx - 0.5, ny - 0.5, nz - 0.5])
    cols = np.arange(w)
    rays_per_chunk = max(1, _CHUNK // int(2 * np.linalg.norm(hi - lo) / geom.step + 2))
    pix_rows = np.repeat(rows, w)
    pix_cols = np.tile(cols, len(rows))
    for start in range(0, len(pix_rows), rays_per_chunk):
        r = pix_rows[start:start + rays_per_chunk]
        c = pix_cols[start:start + rays_per_chunk]
        target = (
            det
            + ((c - (w - 1) / 2.0) * pitch)[:, None] * e_u
            + ((r - (h - 1) / 2.0) * pitch)[:, None] * e_v
        )
        d = target - src
        length = np.linalg.norm(d, axis=1)
        d = d / length[:, None]
        with np.errstate(divide="ignore", invalid="ignore"):
            t1 = (lo - src) / d
            t2 = (hi - src) / d
        tmin = np.where(np.isnan(t1), -np.inf, np.minimum(t1, t2))
        tmax = np.where(np.isnan(t2), np.inf, np.maximum(t1, t2))
        # axis-parallel rays outside the slab never enter
        par = d == 0
        outside = par & ((src < lo) | (src > hi))
        tmin[par] = -np.inf
        tmax[par] = np.inf
        t_in = np.maximum(tmin.max(axis=1), 0.0)
        t_out = np.minimum(tmax.min(axis=1), length)
        seg = np.where(outside.any(axis=1), 0.0, np.maximum(t_out - t_in, 0.0))
        nsteps = np.ceil(seg / geom.step).astype(np.intp)
        hit = nsteps > 0
        if not hit.any():
            continue
        idx = np.flatnonzero(hit)
        ns = nsteps[idx]
        dt = seg[idx] / ns
        ray_of = np.repeat(np.arange(len(idx)), ns)
        k = np.arange(ns.sum()) - np.repeat(np.cumsum(ns) - ns, ns)
        t = t_in[idx][ray_of] + (k + 0.5) * dt[ray_of]
        pts = src + t[:, None] * d[idx][ray_of]
        pix = (r[idx] * w + c[idx])[ray_of]
        yield pix, pts, dt[ray_of]


def forward_project(vol, geom: StereoGeometry, view: int) -> np.ndarray:
    """Ray-driven cone-beam line integrals of ``vol`` onto the detector of ``view``.

    Each ray is marched from the source to the pixel center with steps of at
    most ``geom.step`` voxels; samples are trilinear. Output units are
    volume value times physical length.
    """
    vol = np.asarray(vol, dtype=np.float64)
    if vol.ndim != 3:
        raise ValueError("forward_project expects a 3D volume")
    geom.check_volume(vol.shape)
    out = np.zeros(geom.detector_width * geom.detector_height)
    if not vol.any():
        return out.reshape(geom.detector_shape)
    for pix, pts, dt in _ray_samples(geom, view, vol.shape, np.arange(geom.detector_height)):
        vals = interp_linear(vol, (pts[:, 2], pts[:, 1], pts[:, 0]), border="zero")
        out += np.bincount(pix, weights=vals * dt, minlength=out.size)
    return out.reshape(geom.detector_shape) * geom.voxel_pitch


def _adjoint_project(img, geom, view, dims):
    """Exact transpose of :func:`forward_project` (unweighted ray-driven scatter)."""
    img = np.asarray(img, dtype=np.float64).reshape(-1)
    nz, ny, nx = dims
    out = np.zeros(nz * ny * nx)
    if not img.any():
        return out.reshape(dims)
    for pix, pts, dt in _ray_samples(geom, view, dims, np.arange(geom.detector_height)):
        val = img[pix] * dt * geom.voxel_pitch
        x, y, z = pts[:, 0], pts[:, 1], pts[:, 2]
        inside = (x >= -0.5) & (x <= nx - 0.5) & (y >= -0.5) & (y <= ny - 0.5) & (z >= -0.5) & (z <= nz - 0.5)
        base, frac = [], []
        for c, n in ((z, nz), (y, ny), (x, nx)):
            cc = np.clip(c, 0.0, n - 1.0)
            i0 = np.minimum(np.floor(cc).astype(np.intp), max(n - 2, 0))
            base.append(i0)
            frac.append(cc - i0)
        for corner in range(8):
            bits = ((corner >> 2) & 1, (corner >> 1) & 1, corner & 1)
            w = val * inside
            lin = 0
            for ax, (n, stride) in enumerate(((nz, ny * nx), (ny, nx), (nx, 1))):
                b = bits[ax] if n > 1 else 0
                w = w * (frac[ax] if bits[ax] else 1.0 - frac[ax])
                lin = lin + (base[ax] + b) * stride
            out += np.bincount(lin, weights=w, minlength=out.size)
    return out.reshape(dims)


def ramp_kernel(half_width: int, pitch: float = 1.0) -> np.ndarray:
    """Spatial-domain Ram-Lak kernel sampled at ``-half_width .. half_width``."""
    n = np.arange(-half_width, half_width + 1)
    h = np.zeros(len(n))
    h[n == 0] = 1.0 / (4.0 * pitch**2)
    odd = (n % 2) == 1
    h[odd] = -1.0 / (np.pi**2 * n[odd].astype(np.float64) ** 2 * pitch**2)
    return h


def _fdk_filter(img, geom):
    h, w = img.shape
    sdd = geom.source_object_distance + geom.object_detector_distance
    u = (np.arange(w) - (w - 1) / 2.0) * geom.pixel_pitch
    v = (np.arange(h) - (h - 1) / 2.0) * geom.pixel_pitch
    cosw = sdd / np.sqrt(sdd**2 + u[None, :] ** 2 + v[:, None] ** 2)
    kern = ramp_kernel(w - 1, geom.pixel_pitch) * geom.pixel_pitch
    weighted = img * cosw
    return np.stack([np.convolve(row, kern, mode="same") for row in weighted])


def back_project(img, geom: StereoGeometry, view: int, dims, filtered: bool = False,
                 method: str = "voxel", weighted: bool = True):
    """Back-project detector image ``img`` of ``view`` into a volume of shape ``dims``.

    ``method="voxel"`` (default) projects every voxel center onto the detector,
    samples the image bilinearly (zero outside the detector) and applies the
    FDK inverse-square weight ``(SOD / depth)**2`` unless ``weighted`` is false.
    With ``filtered`` the image is first cosine weighted and ramp filtered
    along detector rows.

    ``method="adjoint"`` is the exact transpose of :func:`forward_project`,
    with no distance weighting; ``filtered`` is ignored for it.
    """
    img = np.asarray(img, dtype=np.float64)
    dims = tuple(int(n) for n in dims)
    if img.shape != geom.detector_shape:
        raise ValueError(f"image shape {img.shape} does not match detector {geom.detector_shape}")
    if len(dims) != 3:
        raise ValueError("dims must be (nz, ny, nx)")
    if view not in (0, 1):
        raise ValueError(f"view must be 0 or 1, got {view}")
    geom.check_volume(dims)
    if method == "adjoint":
        return _adjoint_project(img, geom, view, dims)
    if method != "voxel":
        raise ValueError(f"unknown back-projection method {method!r}")
    if not img.any():
        return np.zeros(dims)
    if filtered:
        img = _fdk_filter(img, geom)
    zz, yy, xx = np.meshgrid(*[np.arange(n, dtype=np.float64) for n in dims], indexing="ij")
    pts = np.stack([xx, yy, zz], axis=-1)
    u, v, depth = project_point(geom, view, dims, pts)
    vals = interp_linear(img, (v, u), border="zero")
    if not weighted:
        return vals
    sod = geom.source_object_distance / geom.voxel_pitch
    return vals * (sod / depth) ** 2


def make_bp_evidence(feat0, feat1, geom: StereoGeometry, dims, filtered: bool = False,
                     weighted: bool = False) -> np.ndarray:
    """Stereo evidence volume: product of the two views' normalized back-projections.

    Values are in ``[0, 1]``; the product concentrates evidence where the ray
    cones of both feature maps intersect. The distance weight is off by
    default: it would favour intersections near the sources.
    """
    parts = []
    for view, feat in enumerate((feat0, feat1)):
        bp = back_project(feat, geom, view, dims, filtered=filtered, weighted=weighted)
        if filtered:
            bp = np.clip(bp, 0.0, None)
        peak = bp.max()
        if peak <= 0:
            log.warning("feature map of view %d is empty; evidence volume is zero", view)
            return np.zeros(tuple(dims))
        parts.append(bp / peak)
    ev = parts[0] * parts[1]
    peak = ev.max()
    if peak <= 0:
        log.warning("back-projected ray cones do not intersect; evidence volume is zero")
        return ev
    return ev / peak
