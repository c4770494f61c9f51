"""Pipeline configuration: one JSON document shared by every CLI verb."""

from __future__ import annotations

import dataclasses
import json
import math
from dataclasses import dataclass
from pathlib import Path


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class GSSettings:
    iterations: int = 5000
    opacity_reset: bool = False
    adc_start: int = 500
    adc_stop: int = 2500
    sh_degree: int = 1
    batch: int = 2


@dataclass(frozen=True)
class PipelineConfig:
    input: str = ""
    output_dir: str = "panoworld_out"
    fov_x_deg: float = 60.0
    heuristic: str = "Anchored"
    prompt_scene: str = "a scene"
    prompt_sky: str = "the sky"
    prompt_ground: str = "the ground"

    pano_width: int = 2048
    view_size: int = 1024
    mid_fov_deg: float = 85.0
    polar_fov_deg: float = 120.0
    polar_pitch_deg: float = 60.0
    feather_px: float = 5.0
    min_overlap: float = 0.25
    refine_views: bool = True
    refine_final: bool = True
    refine_strength: float = 0.3
    refine_blur: float = 4.0

    inpaint_oracle: str = "mock:mirror"
    refine_oracle: str = "mock:refine"
    depth_rel_oracle: str = "synthetic-rel:room"
    depth_metric_oracle: str = "synthetic:room"
    oracle_timeout: float = 600.0
    max_in_flight: int = 2

    lift_size: int = 0  # 0 = view_size
    quantiles: tuple = (0.2, 0.8)
    conf_threshold: float = 0.3
    min_ground: float = 1.5
    stitch_min_overlap: float = 0.2

    cube_side: float = 2.0
    grid_fov_deg: float = 85.0
    grid_size: int = 0  # 0 = view_size
    grid_subset: int = 0  # 0 = all 196 grid cameras
    splat_px: int = 1

    gs: GSSettings = GSSettings()
    seed: int = 0
    workers: int = 1

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        def need(cond, msg):
            if not cond:
                raise ConfigError(msg)

        need(self.heuristic.lower() in ("adhoc", "sequential", "anchored"), f"unknown heuristic {self.heuristic!r}")
        need(0 < self.fov_x_deg < 180, "fov_x_deg must lie in (0, 180)")
        for name in ("mid_fov_deg", "polar_fov_deg", "grid_fov_deg"):
            need(0 < getattr(self, name) < 180, f"{name} must lie in (0, 180)")
        need(self.pano_width >= 8 and self.pano_width % 2 == 0, "pano_width must be an even number >= 8")
        need(self.view_size >= 8, "view_size must be >= 8")
        need(len(self.quantiles) == 2 and 0 <= self.quantiles[0] < self.quantiles[1] <= 1, "bad quantiles")
        need(0 < self.refine_strength <= 1, "refine_strength must lie in (0, 1]")
        need(self.cube_side > 0, "cube_side must be positive")
        need(0 <= self.grid_subset <= 196, "grid_subset must lie in [0, 196]")
        need(self.workers >= 1 and self.max_in_flight >= 1, "workers and max_in_flight must be >= 1")
        need(self.splat_px >= 1, "splat_px must be >= 1")
        need(self.gs.adc_start <= self.gs.adc_stop <= self.gs.iterations, "ADC window must lie inside the run")

    @property
    def fov_x(self) -> float:
        return math.radians(self.fov_x_deg)

    @property
    def lift_resolution(self) -> int:
        return self.lift_size or self.view_size

    @property
    def grid_resolution(self) -> int:
        return self.grid_size or self.view_size

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["quantiles"] = list(self.quantiles)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "PipelineConfig":
        d = dict(d)
        names = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - names
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        if "gs" in d:
            gs = d["gs"]
            if isinstance(gs, dict):
                bad = set(gs) - {f.name for f in dataclasses.fields(GSSettings)}
                if bad:
                    raise ConfigError(f"unknown gs keys: {sorted(bad)}")
                d["gs"] = GSSettings(**gs)
        if "quantiles" in d:
            d["quantiles"] = tuple(float(q) for q in d["quantiles"])
        try:
            return cls(**d)
        except TypeError as exc:
            raise ConfigError(str(exc)) from exc

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=1, sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "PipelineConfig":
        try:
            return cls.from_dict(json.loads(text))
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config is not valid JSON: {exc}") from exc

    @classmethod
    def load(cls, path) -> "PipelineConfig":
        try:
            text = Path(path).read_text()
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
        return cls.from_json(text)

    def save(self, path) -> None:
        Path(path).write_text(self.to_json())

    def override(self, **kw) -> "PipelineConfig":
        """Copy with some fields replaced; ``gs.<name>`` keys reach into the trainer settings."""
        d = self.to_dict()
        for k, v in kw.items():
            if k.startswith("gs."):
                d["gs"][k[3:]] = v
            else:
                d[k] = v
        return PipelineConfig.from_dict(d)
