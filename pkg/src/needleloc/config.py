"""Pipeline configuration: one JSON file, overridable from the command line."""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

from .detection import DetectionNoise, FocalParams, HeatmapGeometry, LossWeights
from .matcher import MatchConstraints
from .phantom import SceneSpec
from .volume import DEFAULT_CLAMP_MAX_HU, DEFAULT_CLAMP_MIN_HU, DEFAULT_TOPHAT_RADIUS_PX


class ConfigError(ValueError):
    pass


SUBSTRATES = ("raw", "tophat")


@dataclass
class PipelineConfig:
    scene: SceneSpec = field(default_factory=SceneSpec)
    noise: DetectionNoise = field(default_factory=lambda: DetectionNoise(sigma_pos=0.5, sigma_angle=math.radians(2.0)))
    downsample: int = 4
    tip_radius_mm: float = 3.0
    handle_radius_mm: float = 4.0
    peak_threshold: float = 0.3
    constraints: MatchConstraints = field(default_factory=MatchConstraints)
    loss_weights: LossWeights = field(default_factory=LossWeights)
    focal: FocalParams = field(default_factory=FocalParams)
    tophat_radius_px: int = DEFAULT_TOPHAT_RADIUS_PX
    clamp_max_hu: float = DEFAULT_CLAMP_MAX_HU
    clamp_min_hu: float = DEFAULT_CLAMP_MIN_HU
    score_substrate: str = "tophat"
    out_dir: str = "out"
    name: str = "case"
    seed: int = 0

    def __post_init__(self) -> None:
        if self.score_substrate not in SUBSTRATES:
            raise ConfigError(f"score_substrate must be one of {SUBSTRATES}")

    def heatmap_geometry(self) -> HeatmapGeometry:
        s = self.scene
        return HeatmapGeometry(
            s.dims[:2], s.spacing[:2], s.origin[:2], self.downsample, self.tip_radius_mm, self.handle_radius_mm
        )

    def synced(self) -> "PipelineConfig":
        """Propagate the root seed and scene priors into the dependent sections."""
        scene = replace(self.scene, rng_seed=self.seed)
        constraints = replace(
            self.constraints,
            l_prior=scene.l_prior,
            n_prior=max(1, scene.n_needles),
            tip_radius_mm=self.tip_radius_mm,
            handle_radius_mm=self.handle_radius_mm,
        )
        return replace(self, scene=scene, constraints=constraints)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["scene"] = self.scene.to_dict()
        return d


_SECTIONS = {
    "scene": SceneSpec,
    "noise": DetectionNoise,
    "constraints": MatchConstraints,
    "loss_weights": LossWeights,
    "focal": FocalParams,
}


def config_from_dict(d: dict) -> PipelineConfig:
    kw = {}
    try:
        for key, value in d.items():
            if key in _SECTIONS:
                cls = _SECTIONS[key]
                unknown = set(value) - set(cls.__dataclass_fields__)
                if unknown:
                    raise ConfigError(f"unknown keys in [{key}]: {sorted(unknown)}")
                if cls is SceneSpec:
                    kw[key] = SceneSpec.from_dict(value)
                else:
                    kw[key] = cls(**value)
            elif key in PipelineConfig.__dataclass_fields__:
                kw[key] = value
            else:
                raise ConfigError(f"unknown config key {key!r}")
        return PipelineConfig(**kw)
    except (TypeError, ValueError) as exc:
        if isinstance(exc, ConfigError):
            raise
        raise ConfigError(str(exc)) from exc


def load_config(path: str | Path | None) -> PipelineConfig:
    if path is None:
        return PipelineConfig()
    try:
        data = json.loads(Path(path).read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: {exc}") from exc
    if not isinstance(data, dict):
        raise ConfigError(f"{path}: top level must be an object")
    return config_from_dict(data)
