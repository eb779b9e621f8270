"""Variational deformable registration in 2D and 3D.

The objective is ``Sim(warp(moving, phi), fixed) + lam * R(phi)`` where ``R``
is the mean squared forward difference of the displacement field (diffusion
regularizer). It is minimized by gradient descent with a backtracking line
search, coarse to fine over a Gaussian pyramid.
"""

from __future__ import annotations

import logging
from dataclasses import asdict, dataclass, field, replace

import numpy as np

from . import _kernels
from .grid import gaussian_smooth, interp_linear, identity_grid, warp

log = logging.getLogger(__name__)

__all__ = [
    "RegConfig",
    "RegResult",
    "RegistrationError",
    "eval_objective",
    "register",
    "register_2d",
    "register_3d_prior",
    "downsample",
    "upsample_field",
]


class RegistrationError(RuntimeError):
    """Registration failed; ``trace`` holds the objective history so far."""

    def __init__(self, msg, trace=None):
        super().__init__(msg)
        self.trace = trace or []


@dataclass(frozen=True)
class RegConfig:
    similarity: str = "ssd"
    lam: float = 0.1
    levels: int = 3
    max_iter: int = 200
    step: float = 1.0
    max_step: float = 4.0
    backtrack: float = 0.5
    tol: float = 1e-5
    # Gaussian preconditioning of the descent direction, in nodes of the current level
    grad_sigma: float = 1.0
    # iterations in a row below ``tol`` before a level counts as converged
    patience: int = 5

    def __post_init__(self):
        if self.similarity not in ("ssd", "ncc"):
            raise ValueError(f"unknown similarity {self.similarity!r}")
        if self.lam < 0:
            raise ValueError("lam must be non-negative")
        if self.levels < 1:
            raise ValueError("levels must be at least 1")
        if self.step <= 0 or self.max_step < self.step:
            raise ValueError("need 0 < step <= max_step")
        if not 0 < self.backtrack < 1:
            raise ValueError("backtrack must be in (0, 1)")
        if self.max_iter < 1:
            raise ValueError("max_iter must be at least 1")

    def to_dict(self):
        return asdict(self)


@dataclass
class RegResult:
    field: np.ndarray
    objective: float
    trace: list = field(default_factory=list)  # (level, iteration, objective)
    converged: bool = False


def _as4(phi):
    """View a (C, ...) field with 1 to 3 spatial axes as (C, nz, ny, nx)."""
    return phi.reshape((phi.shape[0],) + (1,) * (4 - phi.ndim) + phi.shape[1:])


def _forward_diff_sq(phi):
    """Sum over components and axes of squared forward differences."""
    phi = np.ascontiguousarray(phi, dtype=np.float64)
    return _kernels.diffusion(_as4(phi), np.zeros(_as4(phi).shape), 0.0)


def _diffusion_grad(phi):
    """Gradient of :func:`_forward_diff_sq` with respect to ``phi``."""
    phi = np.ascontiguousarray(phi, dtype=np.float64)
    grad = np.zeros_like(phi)
    _kernels.diffusion(_as4(phi), _as4(grad), 1.0)
    return grad


def eval_objective(m, f, phi, cfg: RegConfig):
    """Objective ``E(phi)`` and its gradient with respect to ``phi``.

    Both terms are averaged over grid nodes. The similarity gradient is the
    chain rule through multilinear sampling of ``m``.
    """
    m = np.asarray(m, dtype=np.float64)
    f = np.asarray(f, dtype=np.float64)
    phi = np.ascontiguousarray(phi, dtype=np.float64)
    if m.shape != f.shape:
        raise ValueError(f"moving {m.shape} and fixed {f.shape} differ in shape")
    if phi.shape != (m.ndim,) + m.shape:
        raise ValueError(f"field shape {phi.shape} does not fit images of shape {m.shape}")
    n = m.size
    w, gw = warp(m, phi, gradient=True)
    if cfg.similarity == "ssd":
        r = w - f
        sim = float((r**2).sum()) / n
        dsim_dw = 2.0 * r / n
    else:
        a = w - w.mean()
        b = f - f.mean()
        na = np.sqrt((a**2).sum())
        nb = np.sqrt((b**2).sum())
        if na == 0 or nb == 0:
            sim = 1.0
            dsim_dw = np.zeros_like(w)
        else:
            ncc = float((a * b).sum()) / (na * nb)
            sim = 1.0 - ncc
            dsim_dw = -(b / (na * nb) - ncc * a / na**2)
    grad = dsim_dw[None] * gw
    if cfg.lam > 0:
        grad = np.ascontiguousarray(grad)
        sim += cfg.lam / n * _kernels.diffusion(_as4(phi), _as4(grad), cfg.lam / n)
    return sim, grad


def downsample(img):
    """Halve resolution: Gaussian blur (sigma 1) then keep every other node."""
    sm = gaussian_smooth(img, 1.0)
    return sm[tuple(slice(None, None, 2) for _ in range(sm.ndim))]


def upsample_field(phi, shape):
    """Interpolate a coarse field onto a grid twice as fine, doubling displacements."""
    ndim = len(shape)
    grid = identity_grid(shape)
    coords = [g / 2.0 for g in grid]
    return np.stack([2.0 * interp_linear(comp, coords) for comp in phi])


def _energy(m, f, phi, cfg):
    e, _ = eval_objective(m, f, phi, cfg)
    return e


def _optimize_level(m, f, phi, cfg: RegConfig, level: int, trace: list):
    e, g = eval_objective(m, f, phi, cfg)
    if not np.isfinite(e):
        raise RegistrationError("objective is not finite", trace)
    trace.append((level, 0, e))
    alpha = cfg.step
    quiet = 0
    converged = False
    for it in range(1, cfg.max_iter + 1):
        d = -gaussian_smooth(g, cfg.grad_sigma, vector=True) if cfg.grad_sigma > 0 else -g
        slope = float((g * d).sum())
        norm = np.sqrt((d**2).sum(axis=0)).max()
        if norm == 0 or slope >= 0:
            converged = True
            break
        d /= norm
        slope /= norm
        accepted = False
        while alpha >= 1e-4:
            trial = phi + alpha * d
            e_new, g_new = eval_objective(m, f, trial, cfg)
            if not np.isfinite(e_new):
                raise RegistrationError("objective became non-finite", trace)
            if e_new <= e + 1e-4 * alpha * slope:
                accepted = True
                break
            alpha *= cfg.backtrack
        if not accepted:
            converged = True
            break
        rel = (e - e_new) / max(abs(e), 1e-300)
        phi, e, g = trial, e_new, g_new
        trace.append((level, it, e))
        alpha = min(alpha * 2.0, cfg.max_step)
        quiet = quiet + 1 if rel < cfg.tol else 0
        if quiet >= cfg.patience:
            converged = True
            break
    return phi, e, converged


def register(m, f, cfg: RegConfig) -> RegResult:
    """Coarse-to-fine registration of ``m`` onto ``f`` (any dimension).

    Returns a pull-back field on the grid of ``f`` such that
    ``warp(m, field)`` approximates ``f``.
    """
    m = np.asarray(m, dtype=np.float64)
    f = np.asarray(f, dtype=np.float64)
    if m.shape != f.shape:
        raise ValueError(f"moving {m.shape} and fixed {f.shape} differ in shape")
    if not (np.all(np.isfinite(m)) and np.all(np.isfinite(f))):
        raise ValueError("images must be finite")
    if cfg.similarity == "ssd":
        # a shared intensity scale keeps lam meaningful across datasets
        scale = max(float(np.abs(m).max()), float(np.abs(f).max()), 1e-12)
        m = m / scale
        f = f / scale
    pyramid = [(m, f)]
    for _ in range(cfg.levels - 1):
        pm, pf = pyramid[-1]
        if min(pm.shape) < 8:
            break
        pyramid.append((downsample(pm), downsample(pf)))

    trace: list = []
    phi = None
    converged = True
    for level in range(len(pyramid) - 1, -1, -1):
        lm, lf = pyramid[level]
        if phi is None:
            phi = np.zeros((lm.ndim,) + lm.shape)
        else:
            phi = upsample_field(phi, lm.shape)
        phi, e, ok = _optimize_level(lm, lf, phi, cfg, level, trace)
        converged = converged and ok
    return RegResult(phi, e, trace, converged)


def register_2d(m, f, cfg: RegConfig | None = None) -> RegResult:
    """Estimate a 2D field ``phi`` with ``warp_image(m, phi) ~ f``."""
    cfg = cfg or RegConfig()
    if np.ndim(m) != 2:
        raise ValueError("register_2d expects 2D images")
    return register(m, f, cfg)


def register_3d_prior(v_prior, v_bp, cfg: RegConfig | None = None) -> RegResult:
    """Estimate a 3D field carrying the prior feature volume onto the evidence volume."""
    cfg = cfg or RegConfig(similarity="ncc")
    if np.ndim(v_prior) != 3:
        raise ValueError("register_3d_prior expects 3D volumes")
    if not np.asarray(v_bp).any():
        raise RegistrationError("no evidence: back-projection volume is all zero")
    return register(v_prior, v_bp, cfg)
