"""Simulated stereo sequences: deformed phantoms and their noisy projections."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import streams
from .phantom import DeformationSpec, PhantomSpec, add_poisson_noise, apply_deformation_sequence, gen_start_volume
from .projector import StereoGeometry, forward_project, project_lines_mask

__all__ = ["NoiseSpec", "StereoSequence", "simulate_sequence", "truth_line_maps"]


@dataclass(frozen=True)
class NoiseSpec:
    # Poisson scales: counts per unit of projected intensity
    clean: float = 10.0
    noisy: float = 0.24

    def __post_init__(self):
        if self.clean <= 0 or self.noisy <= 0:
            raise ValueError("noise scales must be positive")

    def to_dict(self):
        return {"clean": self.clean, "noisy": self.noisy}


@dataclass
class StereoSequence:
    """Ground truth and projections of a deforming phantom.

    ``clean[k][v]`` and ``noisy[k][v]`` are the projections of frame ``k`` in
    view ``v`` at the clean and noisy Poisson scales.
    """

    volumes: list
    lines: list
    clean: list
    noisy: list
    meta: dict = field(default_factory=dict)

    @property
    def n_frames(self) -> int:
        return len(self.volumes)

    @property
    def dims(self):
        return self.volumes[0].shape


def simulate_sequence(pspec: PhantomSpec, dspec: DeformationSpec, geom: StereoGeometry,
                      noise: NoiseSpec | None = None, seed: int = 0) -> StereoSequence:
    """Generate a phantom, deform it over ``dspec.n_frames`` frames and project
    every frame in both views at both noise levels."""
    noise = noise or NoiseSpec()
    geom.check_volume((pspec.dims,) * 3)
    vol, lines = gen_start_volume(pspec)
    frames = apply_deformation_sequence(vol, lines, dspec, line_intensity=pspec.line_intensity)
    clean, noisy = [], []
    for k, fr in enumerate(frames):
        proj = [forward_project(fr.volume, geom, v) for v in (0, 1)]
        clean.append([add_poisson_noise(p, noise.clean, streams.derive_seed(seed, "clean", k, v))
                      for v, p in enumerate(proj)])
        noisy.append([add_poisson_noise(p, noise.noisy, streams.derive_seed(seed, "noisy", k, v))
                      for v, p in enumerate(proj)])
    meta = {"phantom": pspec.to_dict(), "deformation": dspec.to_dict(),
            "geometry": geom.to_dict(), "noise": noise.to_dict(), "seed": int(seed)}
    return StereoSequence([f.volume for f in frames], [f.lines for f in frames], clean, noisy, meta)


def truth_line_maps(lines, geom: StereoGeometry, dims):
    """Binary ground-truth line maps of both views."""
    return [project_lines_mask(lines, geom, v, dims) > 0 for v in (0, 1)]
