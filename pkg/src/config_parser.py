"""
Configuration parser for engine YAML files.
"""

import dataclasses
from dataclasses import dataclass, field
from typing import Any, Dict, Optional, Tuple

import yaml

from .env_manager import EnvManager
from .losses import LossWeights, MatchCost
from .utils.exceptions import ConfigurationException
from .utils.logger import logger


@dataclass
class SceneConfig:
    """Load-time conventions for Gaussian fields and predictions."""
    scale_min: float = 0.5
    scale_max: float = 15.0
    num_queries: int = 100
    quat_tolerance: float = 1e-3

    @property
    def scale_bounds(self) -> Tuple[float, float]:
        return (self.scale_min, self.scale_max)


@dataclass
class RasterConfig:
    """Rasterizer constants."""
    near_plane: float = 0.01
    dilation: float = 0.3
    cull_sigma: float = 3.0
    cull_epsilon: float = 1e-8
    opacity_cap: float = 0.99
    transmittance_min: float = 1e-4
    tile_size: int = 16
    attr_warn_dim: int = 4096
    workers: int = 1


@dataclass
class LiftingConfig:
    """Thresholds of the 2D-to-3D lifting."""
    tau_c: float = 0.5
    tau: float = 0.3
    coverage_min: float = 0.5
    attr_budget: int = 16384
    logit_cap: float = 30.0


@dataclass
class LossConfig:
    """Training-objective weights and numerical guards."""
    weights: LossWeights = field(default_factory=LossWeights)
    match_cost: MatchCost = field(default_factory=MatchCost)
    logit_cap: float = 30.0
    dice_smooth: float = 1.0
    grad_eps: float = 1e-4


@dataclass
class MetricsConfig:
    """Evaluation protocol constants."""
    psnr_peak: float = 1.0
    ssim_window: int = 11
    ssim_sigma: float = 1.5
    ssim_k1: float = 0.01
    ssim_k2: float = 0.03
    iou_thresholds: Tuple[float, ...] = (0.5, 0.55, 0.6, 0.65, 0.7, 0.75, 0.8, 0.85, 0.9, 0.95)
    recall_points: int = 101
    pq_match_iou: float = 0.5


@dataclass
class PairingConfig:
    """Overlap-IoU pairing constants."""
    depth_tolerance: float = 0.1
    band_lo: float = 0.3
    band_hi: float = 0.8


@dataclass
class EngineConfig:
    """Complete engine configuration."""
    scene: SceneConfig = field(default_factory=SceneConfig)
    raster: RasterConfig = field(default_factory=RasterConfig)
    lifting: LiftingConfig = field(default_factory=LiftingConfig)
    losses: LossConfig = field(default_factory=LossConfig)
    metrics: MetricsConfig = field(default_factory=MetricsConfig)
    pairing: PairingConfig = field(default_factory=PairingConfig)

    def to_dict(self) -> Dict[str, Any]:
        """Plain-data snapshot, suitable for a bundle manifest."""
        snapshot = dataclasses.asdict(self)
        snapshot["metrics"]["iou_thresholds"] = list(self.metrics.iou_thresholds)
        return snapshot

    def merged(self, values: Optional[Dict[str, Any]]) -> "EngineConfig":
        """Return a copy with the given nested values applied on top."""
        return config_from_dict(values or {}, base=self)


SECTIONS = ("scene", "raster", "lifting", "losses", "metrics", "pairing")


def _apply(target: Any, values: Dict[str, Any], path: str) -> Any:
    """Recursively replace dataclass fields with the given values."""
    if not isinstance(values, dict):
        raise ConfigurationException(f"Section '{path}' must be a mapping")

    known = {f.name: f for f in dataclasses.fields(target)}
    updates = {}
    for key, value in values.items():
        if key not in known:
            raise ConfigurationException(
                f"Unknown configuration key '{path}.{key}'. "
                f"Supported keys: {sorted(known)}"
            )
        current = getattr(target, key)
        if dataclasses.is_dataclass(current):
            updates[key] = _apply(current, value, f"{path}.{key}")
        elif isinstance(current, tuple):
            updates[key] = tuple(float(v) for v in value)
        elif isinstance(current, bool):
            updates[key] = bool(value)
        elif isinstance(current, int):
            updates[key] = int(value)
        elif isinstance(current, float):
            updates[key] = float(value)
        else:
            updates[key] = value
    return dataclasses.replace(target, **updates)


def _validate(config: EngineConfig) -> None:
    """Check value ranges, naming the offending key."""
    checks = [
        ("scene.scale_min", 0 < config.scene.scale_min <= config.scene.scale_max),
        ("scene.num_queries", config.scene.num_queries >= 1),
        ("raster.near_plane", config.raster.near_plane > 0),
        ("raster.dilation", config.raster.dilation >= 0),
        ("raster.opacity_cap", 0 < config.raster.opacity_cap <= 1),
        ("raster.transmittance_min", 0 <= config.raster.transmittance_min < 1),
        ("raster.tile_size", config.raster.tile_size >= 1),
        ("raster.workers", config.raster.workers >= 1),
        ("lifting.tau_c", 0 < config.lifting.tau_c < 1),
        ("lifting.tau", 0 < config.lifting.tau < 1),
        ("lifting.attr_budget", config.lifting.attr_budget >= 1),
        ("losses.weights", all(w >= 0 for w in dataclasses.astuple(config.losses.weights))),
        ("losses.match_cost", all(w >= 0 for w in dataclasses.astuple(config.losses.match_cost))
         and any(w > 0 for w in dataclasses.astuple(config.losses.match_cost))),
        ("metrics.ssim_window", config.metrics.ssim_window >= 1 and config.metrics.ssim_window % 2 == 1),
        ("metrics.recall_points", config.metrics.recall_points >= 2),
        ("pairing.band_lo", config.pairing.band_lo < config.pairing.band_hi),
        ("pairing.depth_tolerance", config.pairing.depth_tolerance > 0),
    ]
    for key, ok in checks:
        if not ok:
            raise ConfigurationException(f"Invalid value for '{key}'")


def config_from_dict(values: Dict[str, Any], base: Optional[EngineConfig] = None) -> EngineConfig:
    """
    Build an EngineConfig from nested plain data.

    Args:
        values: Mapping of section name to section values
        base: Configuration to start from (default: engine defaults)

    Returns:
        Validated EngineConfig
    """
    config = base or EngineConfig()
    for section, section_values in values.items():
        if section not in SECTIONS:
            raise ConfigurationException(
                f"Unknown configuration section '{section}'. Supported sections: {list(SECTIONS)}"
            )
        updated = _apply(getattr(config, section), section_values or {}, section)
        config = dataclasses.replace(config, **{section: updated})
    _validate(config)
    return config


class ConfigParser:
    """Parser for engine YAML configuration files with environment overrides."""

    def __init__(self, config_path: Optional[str] = None, env_dir: str = None, profile: str = None):
        """
        Initialize config parser.

        Args:
            config_path: Path to YAML configuration file (default: engine defaults only)
            env_dir: Directory containing .env files
            profile: Optional .env profile name
        """
        self.config_path = config_path
        self.env_manager = EnvManager(env_dir)
        self.profile = profile

    def load_values(self) -> Dict[str, Any]:
        """
        Nested raw values from the YAML file with environment overrides applied on top.

        Raises:
            ConfigurationException: If the file is missing or malformed
        """
        values: Dict[str, Any] = {}
        if self.config_path:
            try:
                with open(self.config_path, 'r') as f:
                    values = yaml.safe_load(f) or {}
                logger.info(f"Loaded engine config: {self.config_path}")
            except FileNotFoundError:
                raise ConfigurationException(f"Configuration file not found: {self.config_path}")
            except yaml.YAMLError as e:
                raise ConfigurationException(f"Failed to parse YAML configuration: {str(e)}")
        if not isinstance(values, dict):
            raise ConfigurationException("Configuration file must hold a mapping of sections")

        overrides = self.env_manager.get_overrides(self.profile)
        for (section, key), value in overrides.items():
            section_values = values.setdefault(section, {}) or {}
            values[section] = section_values
            section_values[key] = value
        if overrides:
            logger.info(f"Applied {len(overrides)} environment override(s)")
        return values

    def parse(self) -> EngineConfig:
        """
        Parse the YAML file and apply environment overrides.

        Returns:
            EngineConfig object

        Raises:
            ConfigurationException: If the file is missing, malformed or holds invalid values
        """
        return config_from_dict(self.load_values())
