"""Experiment configuration: one JSON file with nested sections.

Section seeds are not configurable; they are derived from the master seed so
that a single integer reproduces a whole experiment.
"""

from __future__ import annotations

import copy
import dataclasses
import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path

from . import streams
from .phantom import DeformationSpec, PhantomSpec
from .projector import StereoGeometry
from .registration import RegConfig
from .simulate import NoiseSpec
from .tracking import TrackConfig

__all__ = ["ExperimentConfig", "ConfigError", "SCALES", "preset", "load_config"]

SCALES = ("desk", "paper")


class ConfigError(ValueError):
    pass


def _fields(cls, exclude=()):
    return [f.name for f in dataclasses.fields(cls) if f.name not in exclude]


def preset(scale: str) -> dict:
    """Complete default configuration for ``scale``."""
    if scale not in SCALES:
        raise ConfigError(f"unknown scale {scale!r}; expected one of {SCALES}")
    dims = 64 if scale == "desk" else 256
    geom = StereoGeometry.desk(dims) if scale == "desk" else StereoGeometry.paper()
    track = TrackConfig()
    phantom = PhantomSpec(dims=dims).to_dict()
    phantom.pop("seed")
    deformation = DeformationSpec().to_dict()
    deformation.pop("seed")
    return {
        "scale": scale,
        "seed": 0,
        "output_dir": f"runs/{scale}",
        "phantom": phantom,
        "deformation": deformation,
        "geometry": geom.to_dict(),
        "noise": NoiseSpec().to_dict(),
        "registration_2d": track.reg2d.to_dict(),
        "registration_3d": track.reg3d.to_dict(),
        "detector": {
            "marker_radius_px": track.marker_radius_px,
            "n_orientations": track.n_orientations,
            "elongation": track.elongation,
            "threshold": track.detect_threshold,
            "binarize": track.binarize,
            "filtered": track.filtered,
        },
        "tracking": {"strategy": "both", "extract_threshold": track.extract_threshold},
        "thresholds": {"max_chamfer": None, "min_auc": None, "max_line_error": None},
    }


# keys whose values follow the scale preset unless the config sets them
_SCALE_KEYS = (("phantom", "dims"), ("geometry", None))
_STRATEGIES = ("start_frame", "chained", "both")


def _merge(base: dict, over: dict, path: str = "") -> dict:
    out = copy.deepcopy(base)
    for k, v in over.items():
        where = f"{path}.{k}" if path else k
        if k not in base:
            raise ConfigError(f"unknown key {where!r}")
        if isinstance(base[k], dict):
            if not isinstance(v, dict):
                raise ConfigError(f"{where!r} must be a section")
            out[k] = _merge(base[k], v, where)
        else:
            out[k] = v
    return out


@dataclass(frozen=True)
class ExperimentConfig:
    """Validated, fully resolved experiment configuration."""

    data: dict = field(default_factory=lambda: preset("desk"))

    def __post_init__(self):
        self._validate()

    @classmethod
    def from_dict(cls, d: dict | None = None, scale: str | None = None, seed: int | None = None,
                  output_dir: str | None = None) -> "ExperimentConfig":
        """Resolve ``d`` against its scale preset and apply command-line overrides.

        An explicit ``scale`` replaces the volume size and geometry with that
        scale's preset, whatever ``d`` says.
        """
        d = copy.deepcopy(d or {})
        base_scale = d.get("scale", "desk")
        resolved = _merge(preset(base_scale), d)
        if scale is not None and scale != resolved["scale"]:
            p = preset(scale)
            resolved["scale"] = scale
            resolved["phantom"]["dims"] = p["phantom"]["dims"]
            resolved["geometry"] = p["geometry"]
            if "output_dir" not in d:
                resolved["output_dir"] = p["output_dir"]
        if seed is not None:
            resolved["seed"] = int(seed)
        if output_dir is not None:
            resolved["output_dir"] = str(output_dir)
        return cls(resolved)

    def _validate(self):
        d = self.data
        ref = preset(d.get("scale", "desk"))
        _merge(ref, d)  # rejects unknown keys and missing sections stay at defaults
        for section in ref:
            if section not in d:
                raise ConfigError(f"missing section {section!r}")
        if not isinstance(d["seed"], int) or d["seed"] < 0:
            raise ConfigError("seed must be a non-negative integer")
        if d["tracking"]["strategy"] not in _STRATEGIES:
            raise ConfigError(f"tracking.strategy must be one of {_STRATEGIES}")
        try:
            self.phantom_spec()
            self.deformation_spec().check_dims(d["phantom"]["dims"])
            self.geometry().check_volume((d["phantom"]["dims"],) * 3)
            self.noise()
            self.track_config()
        except (TypeError, ValueError) as exc:
            raise ConfigError(str(exc)) from exc

    # typed views -----------------------------------------------------------

    @property
    def seed(self) -> int:
        return self.data["seed"]

    @property
    def scale(self) -> str:
        return self.data["scale"]

    @property
    def output_dir(self) -> Path:
        return Path(self.data["output_dir"])

    @property
    def strategies(self) -> list:
        s = self.data["tracking"]["strategy"]
        return ["start_frame", "chained"] if s == "both" else [s]

    @property
    def thresholds(self) -> dict:
        return {k: v for k, v in self.data["thresholds"].items() if v is not None}

    def section_seed(self, name: str) -> int:
        return streams.derive_seed(self.seed, name)

    def phantom_spec(self) -> PhantomSpec:
        return PhantomSpec(**self.data["phantom"], seed=self.section_seed("phantom"))

    def deformation_spec(self) -> DeformationSpec:
        return DeformationSpec(**self.data["deformation"], seed=self.section_seed("deformation"))

    def geometry(self) -> StereoGeometry:
        return StereoGeometry.from_dict(self.data["geometry"])

    def noise(self) -> NoiseSpec:
        return NoiseSpec(**self.data["noise"])

    def track_config(self) -> TrackConfig:
        det = self.data["detector"]
        return TrackConfig(
            reg2d=RegConfig(**self.data["registration_2d"]),
            reg3d=RegConfig(**self.data["registration_3d"]),
            marker_radius_px=det["marker_radius_px"],
            n_orientations=det["n_orientations"],
            elongation=det["elongation"],
            detect_threshold=det["threshold"],
            binarize=det["binarize"],
            filtered=det["filtered"],
            extract_threshold=self.data["tracking"]["extract_threshold"],
        )

    # serialization -----------------------------------------------------------

    def to_dict(self) -> dict:
        return copy.deepcopy(self.data)

    def canonical_json(self) -> str:
        return json.dumps(self.data, sort_keys=True, separators=(",", ":"))

    def config_hash(self) -> str:
        return hashlib.sha256(self.canonical_json().encode()).hexdigest()

    def seeds(self) -> dict:
        return {"master": self.seed, **{s: self.section_seed(s) for s in ("phantom", "deformation", "noise")}}


def load_config(path=None, scale=None, seed=None, output_dir=None) -> ExperimentConfig:
    """Read a JSON config file (or start from the preset when ``path`` is None)."""
    d = {}
    if path is not None:
        try:
            d = json.loads(Path(path).read_text())
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: {exc}") from exc
        if not isinstance(d, dict):
            raise ConfigError(f"{path}: top level must be an object")
    return ExperimentConfig.from_dict(d, scale=scale, seed=seed, output_dir=output_dir)
