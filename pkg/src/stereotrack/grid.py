"""Dense grid primitives: linear sampling, warping, smoothing and rasterization.

Array conventions used throughout the package:

* images are ``(height, width)`` arrays indexed ``img[y, x]``;
* volumes are ``(nz, ny, nx)`` arrays indexed ``vol[z, y, x]`` (x fastest in
  memory, matching the on-disk ordering);
* displacement fields carry the components first, in point order:
  ``(2, H, W)`` holds ``(dx, dy)`` and ``(3, nz, ny, nx)`` holds ``(dx, dy, dz)``;
* continuous points are given in point order ``(x, y[, z])`` with pixel and
  voxel centers at integer coordinates starting from 0.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage

from . import _kernels

__all__ = [
    "Polyline3",
    "interp_linear",
    "sample_bilinear",
    "sample_trilinear",
    "warp_image",
    "warp_volume",
    "warp",
    "gaussian_kernel",
    "gaussian_smooth",
    "point_segment_distance",
    "rasterize_path",
    "rasterize_polyline",
    "rasterize_polylines",
    "identity_grid",
]


@dataclass
class Polyline3:
    """Ordered 3D point sequence describing one line fiducial.

    ``points`` is an ``(N, 3)`` array of ``(x, y, z)`` voxel coordinates.
    """

    points: np.ndarray
    radius: float = 1.0
    meta: dict = field(default_factory=dict, compare=False, repr=False)

    def __post_init__(self):
        pts = np.asarray(self.points, dtype=np.float64)
        if pts.ndim != 2 or pts.shape[1] != 3:
            raise ValueError(f"polyline points must be (N, 3), got {pts.shape}")
        if len(pts) < 2:
            raise ValueError("polyline needs at least 2 points")
        if not np.all(np.isfinite(pts)):
            raise ValueError("polyline points must be finite")
        if np.any(np.linalg.norm(np.diff(pts, axis=0), axis=1) == 0):
            raise ValueError("consecutive polyline points must be distinct")
        if self.radius < 0:
            raise ValueError("radius must be non-negative")
        self.points = pts

    @property
    def length(self) -> float:
        return float(np.linalg.norm(np.diff(self.points, axis=0), axis=1).sum())

    def resample(self, spacing: float = 0.5) -> np.ndarray:
        """Points along the polyline with arc-length spacing at most ``spacing``."""
        seg = np.linalg.norm(np.diff(self.points, axis=0), axis=1)
        s = np.concatenate([[0.0], np.cumsum(seg)])
        n = max(int(math.ceil(s[-1] / spacing)), 1) + 1
        t = np.linspace(0.0, s[-1], n)
        return np.stack([np.interp(t, s, self.points[:, k]) for k in range(3)], axis=1)


def _check_finite(arr, what):
    if not np.all(np.isfinite(arr)):
        raise ValueError(f"{what} must be finite")


def interp_linear(arr, coords, gradient=False, border="clamp"):
    """Multilinear interpolation of ``arr`` at continuous array-order coordinates.

    Parameters
    ----------
    arr : ndarray
        2D or 3D grid.
    coords : sequence of ndarray
        One coordinate array per axis of ``arr``, in array-axis order
        (``(y, x)`` for images, ``(z, y, x)`` for volumes). All share a shape.
    gradient : bool
        Also return the derivative of the interpolant with respect to each
        coordinate (array-axis order). Clamped axes have zero derivative.
    border : {"clamp", "zero"}
        ``"clamp"`` repeats edge values; ``"zero"`` treats the grid as zero
        outside ``[-0.5, n - 0.5]`` along each axis and clamps inside that band.

    Returns
    -------
    values : ndarray
    grads : list of ndarray, only if ``gradient`` is true
    """
    arr = np.asarray(arr)
    ndim = arr.ndim
    if len(coords) != ndim:
        raise ValueError(f"expected {ndim} coordinate arrays, got {len(coords)}")
    shape = np.broadcast(*coords).shape
    base, frac, inside, live = [], [], None, []
    for ax in range(ndim):
        n = arr.shape[ax]
        c = np.broadcast_to(np.asarray(coords[ax], dtype=np.float64), shape)
        if border == "zero":
            ok = (c >= -0.5) & (c <= n - 0.5)
            inside = ok if inside is None else inside & ok
        cc = np.clip(c, 0.0, n - 1.0)
        # derivative vanishes where the coordinate got clamped
        live.append((c > 0.0) & (c < n - 1.0))
        i0 = np.floor(cc).astype(np.intp)
        i0 = np.minimum(i0, max(n - 2, 0))
        base.append(i0)
        frac.append(cc - i0)

    strides = [int(np.prod(arr.shape[ax + 1:])) for ax in range(ndim)]
    flat = arr.reshape(-1)
    step = [1 if arr.shape[ax] > 1 else 0 for ax in range(ndim)]
    lin0 = sum(base[ax] * strides[ax] for ax in range(ndim))

    values = np.zeros(shape)
    grads = [np.zeros(shape) for _ in range(ndim)] if gradient else None
    for corner in range(1 << ndim):
        bits = [(corner >> (ndim - 1 - ax)) & 1 for ax in range(ndim)]
        offset = sum(bits[ax] * step[ax] * strides[ax] for ax in range(ndim))
        v = flat[lin0 + offset]
        ws = [frac[ax] if bits[ax] else 1.0 - frac[ax] for ax in range(ndim)]
        w = ws[0]
        for ax in range(1, ndim):
            w = w * ws[ax]
        values += w * v
        if gradient:
            for ax in range(ndim):
                dw = 1.0 if bits[ax] else -1.0
                for other in range(ndim):
                    if other != ax:
                        dw = dw * ws[other]
                grads[ax] += dw * v

    if gradient:
        for ax in range(ndim):
            if arr.shape[ax] == 1:
                grads[ax][...] = 0.0
            grads[ax] *= live[ax]
    if inside is not None:
        values *= inside
        if gradient:
            for g in grads:
                g *= inside
    if gradient:
        return values, grads
    return values


def sample_bilinear(img, p) -> float:
    """Bilinear sample of ``img`` at point ``p = (x, y)``, clamp-to-edge."""
    x, y = (float(v) for v in p)
    if not (math.isfinite(x) and math.isfinite(y)):
        raise ValueError("sample point must be finite")
    return float(interp_linear(img, (np.array(y), np.array(x))))


def sample_trilinear(vol, p) -> float:
    """Trilinear sample of ``vol`` at point ``p = (x, y, z)``, clamp-to-edge."""
    x, y, z = (float(v) for v in p)
    if not all(math.isfinite(v) for v in (x, y, z)):
        raise ValueError("sample point must be finite")
    return float(interp_linear(vol, (np.array(z), np.array(y), np.array(x))))


def identity_grid(shape):
    """Node coordinates of a grid, array-axis order, as float arrays."""
    return [c.astype(np.float64) for c in np.meshgrid(*[np.arange(n) for n in shape], indexing="ij")]


def _field_coords(phi, shape):
    """Pull-back sample coordinates (array-axis order) for a point-order field."""
    ndim = len(shape)
    phi = np.asarray(phi, dtype=np.float64)
    if phi.shape != (ndim,) + tuple(shape):
        raise ValueError(f"field shape {phi.shape} does not match grid {(ndim,) + tuple(shape)}")
    _check_finite(phi, "displacement field")
    grid = identity_grid(shape)
    # point-order component k displaces array axis ndim-1-k
    return [grid[ax] + phi[ndim - 1 - ax] for ax in range(ndim)]


def warp(src, phi, gradient=False):
    """Pull-back warp: ``out(x) = src(x + phi(x))`` by multilinear sampling.

    With ``gradient`` the spatial gradient of the interpolant at the sample
    positions is also returned, in point order (matching ``phi``'s components).
    """
    src = np.ascontiguousarray(src, dtype=np.float64)
    phi = np.ascontiguousarray(phi, dtype=np.float64)
    if phi.shape != (src.ndim,) + src.shape:
        raise ValueError(f"field shape {phi.shape} does not match grid {(src.ndim,) + src.shape}")
    _check_finite(phi, "displacement field")
    out = np.empty(src.shape)
    grad = np.empty(phi.shape) if gradient else np.empty((src.ndim,) + (1,) * src.ndim)
    if src.ndim == 2:
        _kernels.warp2(src, phi, out, grad, gradient)
    elif src.ndim == 3:
        _kernels.warp3(src, phi, out, grad, gradient)
    else:
        values = interp_linear(src, _field_coords(phi, src.shape), gradient=gradient)
        if not gradient:
            return values
        return values[0], np.stack(values[1][::-1])
    if gradient:
        return out, grad
    return out


def warp_image(m, phi):
    """Warp image ``m`` by 2D displacement field ``phi`` of shape ``(2, H, W)``."""
    m = np.asarray(m, dtype=np.float64)
    if m.ndim != 2:
        raise ValueError("warp_image expects a 2D image")
    return warp(m, phi)


def warp_volume(v, phi):
    """Warp volume ``v`` by 3D displacement field ``phi`` of shape ``(3, nz, ny, nx)``."""
    v = np.asarray(v, dtype=np.float64)
    if v.ndim != 3:
        raise ValueError("warp_volume expects a 3D volume")
    return warp(v, phi)


def gaussian_kernel(sigma: float) -> np.ndarray:
    """Sampled Gaussian truncated at ``ceil(3 sigma)`` and renormalized to unit sum."""
    if sigma < 0:
        raise ValueError("sigma must be non-negative")
    if sigma == 0:
        return np.ones(1)
    r = int(math.ceil(3.0 * sigma))
    x = np.arange(-r, r + 1, dtype=np.float64)
    k = np.exp(-0.5 * (x / sigma) ** 2)
    return k / k.sum()


def gaussian_smooth(grid, sigma: float, vector: bool = False):
    """Separable Gaussian smoothing with clamp-to-edge borders.

    If ``vector`` is true the leading axis of ``grid`` indexes field components
    and is not smoothed over.
    """
    if sigma < 0:
        raise ValueError("sigma must be non-negative")
    out = np.array(grid, dtype=np.float64, copy=True)
    if sigma == 0:
        return out
    k = gaussian_kernel(sigma)
    axes = range(1, out.ndim) if vector else range(out.ndim)
    for ax in axes:
        out = ndimage.correlate1d(out, k, axis=ax, mode="nearest")
    return out


def point_segment_distance(pts, a, b):
    """Euclidean distance from each point in ``pts`` (…, d) to segment ``ab``."""
    pts = np.asarray(pts, dtype=np.float64)
    a = np.asarray(a, dtype=np.float64)
    ab = np.asarray(b, dtype=np.float64) - a
    denom = float(ab @ ab)
    if denom == 0.0:
        return np.linalg.norm(pts - a, axis=-1)
    t = np.clip(((pts - a) @ ab) / denom, 0.0, 1.0)
    return np.linalg.norm(pts - a - t[..., None] * ab, axis=-1)


def rasterize_path(points, radius: float, shape) -> np.ndarray:
    """Binary grid of ``shape`` (array order): 1 where a node center lies within
    ``radius`` of the path through ``points`` (point order, ``(N, len(shape))``)."""
    pts = np.asarray(points, dtype=np.float64)
    shape = tuple(int(n) for n in shape)
    if pts.ndim != 2 or len(pts) == 0 or pts.shape[1] != len(shape):
        raise ValueError("points must be a nonempty (N, d) array matching the grid")
    if len(pts) == 1:
        pts = np.vstack([pts, pts])
    out = np.zeros(shape)
    r = float(radius)
    hi = np.array(shape[::-1]) - 1  # upper index bounds in point order
    for a, b in zip(pts[:-1], pts[1:]):
        lo_p = np.maximum(np.floor(np.minimum(a, b) - r) - 1, 0).astype(int)
        hi_p = np.minimum(np.ceil(np.maximum(a, b) + r) + 1, hi).astype(int)
        if np.any(hi_p < lo_p):
            continue
        axes = [np.arange(lo_p[k], hi_p[k] + 1) for k in range(len(shape))]
        mesh = np.meshgrid(*axes[::-1], indexing="ij")  # array order
        centers = np.stack(mesh[::-1], axis=-1).astype(np.float64)
        hit = point_segment_distance(centers, a, b) <= r + 1e-9
        box = out[tuple(slice(lo_p[k], hi_p[k] + 1) for k in reversed(range(len(shape))))]
        box[hit] = 1.0
    return out


def rasterize_polyline(line: Polyline3, shape) -> np.ndarray:
    """Binary volume of ``shape`` (nz, ny, nx): 1 where a voxel center is within
    ``line.radius`` of the polyline."""
    return rasterize_path(line.points, line.radius, shape)


def rasterize_polylines(lines, shape) -> np.ndarray:
    """Union of :func:`rasterize_polyline` over several lines."""
    out = np.zeros(tuple(shape))
    for line in lines:
        np.maximum(out, rasterize_polyline(line, shape), out=out)
    return out
