from __future__ import annotations

import logging
import os
import sys
from dataclasses import dataclass, field, fields, replace
from pathlib import Path
from typing import Any, Dict, Optional, Type, Union

from dotenv import load_dotenv

if sys.version_info >= (3, 11):
    import tomllib
else:  # pragma: no cover - Python 3.10 backport
    import tomli as tomllib

from app.encoding import HashEncodingConfig
from app.field import FieldConfig
from app.optimizer import AdamConfig
from app.renderer import RenderConfig
from app.sampling_strategy import SamplerConfig
from app.trainer import TrainConfig


load_dotenv()

LOG_FORMAT = "%(asctime)s %(levelname)s %(name)s: %(message)s"


class ConfigError(ValueError):
    """Malformed configuration file or environment value."""


@dataclass(frozen=True)
class RuntimeConfig:
    log_level: str = "WARNING"
    workers: int = 1


def get_runtime_config() -> RuntimeConfig:
    level = os.getenv("M2MAP_LOG", "WARNING").strip().upper() or "WARNING"
    if sys.version_info >= (3, 11):
        level_names = logging.getLevelNamesMapping()
    else:  # pragma: no cover - Python 3.10 has no public accessor
        level_names = logging._nameToLevel
    if level not in level_names:
        raise ConfigError(f"M2MAP_LOG must be a logging level name, got '{level}'")
    raw_workers = os.getenv("M2MAP_WORKERS", "1").strip() or "1"
    try:
        workers = int(raw_workers)
    except ValueError as e:
        raise ConfigError(f"M2MAP_WORKERS must be an integer, got '{raw_workers}'") from e
    if workers < 1:
        raise ConfigError(f"M2MAP_WORKERS must be >= 1, got {workers}")
    return RuntimeConfig(log_level=level, workers=workers)


def configure_logging(level: Union[str, int] = "WARNING") -> None:
    logging.basicConfig(level=level, format=LOG_FORMAT, force=True)


@dataclass(frozen=True)
class OccupancyConfig:
    voxel_size: float = 0.1
    ray_stride: int = 4

    def __post_init__(self) -> None:
        if self.voxel_size <= 0:
            raise ValueError(f"voxel_size must be positive, got {self.voxel_size}")
        if self.ray_stride < 1:
            raise ValueError(f"ray_stride must be >= 1, got {self.ray_stride}")


@dataclass(frozen=True)
class SyntheticConfig:
    views: int = 12
    held_out_views: int = 4
    width: int = 128
    height: int = 128
    focal: float = 110.0
    lidar_rays_per_scan: int = 2000
    noise_sigma: float = 0.0
    orbit_radius: float = 0.9
    orbit_height: float = 1.1
    gt_resolution: int = 128

    def __post_init__(self) -> None:
        if self.views < 1 or self.held_out_views < 0:
            raise ValueError("Need views >= 1 and held_out_views >= 0")
        if self.width < 1 or self.height < 1 or self.focal <= 0:
            raise ValueError("Image size and focal length must be positive")
        if self.lidar_rays_per_scan < 0 or self.noise_sigma < 0:
            raise ValueError("lidar_rays_per_scan and noise_sigma must be >= 0")


@dataclass(frozen=True)
class PipelineConfig:
    encoding: HashEncodingConfig = field(default_factory=HashEncodingConfig)
    network: FieldConfig = field(default_factory=FieldConfig)
    sampler: SamplerConfig = field(default_factory=SamplerConfig)
    occupancy: OccupancyConfig = field(default_factory=OccupancyConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    render: RenderConfig = field(default_factory=RenderConfig)
    synthetic: SyntheticConfig = field(default_factory=SyntheticConfig)

    def field_config(self) -> FieldConfig:
        """FieldConfig carrying the [hash] section as its encoding."""
        return replace(self.network, encoding=self.encoding)

    def with_seed(self, seed: Optional[int]) -> "PipelineConfig":
        if seed is None:
            return self
        return replace(self, train=replace(self.train, seed=seed))

    def full_scale(self) -> "PipelineConfig":
        """Full-size hash tables and LiDAR point budget."""
        return replace(
            self,
            encoding=HashEncodingConfig.full_scale(),
            train=replace(self.train, point_budget=256_000),
        )


# TOML section -> dataclass; _NESTED keys are filled from their own section.
_SECTIONS: Dict[str, Type] = {
    "hash": HashEncodingConfig,
    "field": FieldConfig,
    "sampler": SamplerConfig,
    "occupancy": OccupancyConfig,
    "train": TrainConfig,
    "adam": AdamConfig,
    "render": RenderConfig,
    "synthetic": SyntheticConfig,
}
_NESTED = {"field": ("encoding",), "train": ("adam",)}


def _build_section(name: str, raw: Any) -> Any:
    cls = _SECTIONS[name]
    if not isinstance(raw, dict):
        raise ConfigError(f"[{name}] must be a table")
    allowed = {f.name for f in fields(cls)} - set(_NESTED.get(name, ()))
    for key in raw:
        if key not in allowed:
            raise ConfigError(f"Unknown key '{key}' in [{name}]")
    values = {k: tuple(v) if isinstance(v, list) else v for k, v in raw.items()}
    try:
        return cls(**values)
    except (TypeError, ValueError) as e:
        raise ConfigError(f"[{name}]: {e}") from e


def parse_config(raw: Dict[str, Any]) -> PipelineConfig:
    """Build a PipelineConfig from an already-parsed TOML document."""
    for section in raw:
        if section not in _SECTIONS:
            raise ConfigError(f"Unknown config section [{section}]")
    built = {name: _build_section(name, raw.get(name, {})) for name in _SECTIONS}
    train = replace(built["train"], adam=built["adam"])
    return PipelineConfig(
        encoding=built["hash"],
        network=built["field"],
        sampler=built["sampler"],
        occupancy=built["occupancy"],
        train=train,
        render=built["render"],
        synthetic=built["synthetic"],
    )


def load_config(path: Optional[Union[str, Path]] = None) -> PipelineConfig:
    """
    Read a pipeline TOML file; no path gives the desk-scale defaults.

    Raises:
        ConfigError: missing file, TOML syntax error, unknown section or key,
            or a value rejected by the section's dataclass
    """
    if path is None:
        return PipelineConfig()
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"Config file not found: {path}")
    try:
        with path.open("rb") as handle:
            raw = tomllib.load(handle)
    except tomllib.TOMLDecodeError as e:
        raise ConfigError(f"{path}: {e}") from e
    config = parse_config(raw)
    logging.info("Loaded config %s", path)
    return config
