"""Dotted ``key = value`` configuration files.

Blank lines and ``#`` comments are ignored. Every key must be known; values
are validated by the dataclasses they end up in.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .multires import SelectionConfig
from .pipeline import PipelineConfig
from .registration import RegistrationConfig
from .simulation import GroundTruthTrajectory, SensorModel, generate_room_scene
from .storage import BACKENDS


class ConfigError(ValueError):
    pass


@dataclass
class SimulationConfig:
    seed: int = 0
    duration: float = 10.0
    trajectory: str = "figure_eight"
    trajectory_period: float = 20.0
    trajectory_scale: float = 1.0
    room_extent: float = 10.0
    beams: int = 16
    elevation_min_deg: float = -15.0
    elevation_max_deg: float = 15.0
    azimuth_steps: int = 360
    max_range: float = 16.0
    scan_period: float = 0.1
    range_noise: float = 0.0

    def __post_init__(self):
        if not self.duration >= 0:
            raise ValueError("duration must be >= 0")
        if self.beams < 1:
            raise ValueError("beams must be >= 1")
        if not self.elevation_min_deg <= self.elevation_max_deg:
            raise ValueError("elevation_min_deg must not exceed elevation_max_deg")
        if not self.scan_period > 0:
            raise ValueError("scan_period must be positive")
        if not self.range_noise >= 0:
            raise ValueError("range_noise must be >= 0")
        if not self.trajectory_period > 0 or not self.trajectory_scale >= 0:
            raise ValueError("trajectory period must be positive and scale non-negative")
        if not self.room_extent > 0:
            raise ValueError("room_extent must be positive")
        # delegate the remaining checks
        self.sensor()
        self.ground_truth()

    @property
    def num_scans(self) -> int:
        return int(math.floor(self.duration / self.scan_period + 1e-9))

    def sensor(self) -> SensorModel:
        return SensorModel(
            elevations=np.deg2rad(np.linspace(self.elevation_min_deg, self.elevation_max_deg, self.beams)),
            azimuth_steps=self.azimuth_steps,
            max_range=self.max_range,
            scan_period=self.scan_period,
            range_noise=self.range_noise,
        )

    def ground_truth(self) -> GroundTruthTrajectory:
        return GroundTruthTrajectory(self.trajectory, scale=self.trajectory_scale, period=self.trajectory_period)

    def scene(self):
        return generate_room_scene(self.room_extent)


@dataclass
class Config:
    pipeline: PipelineConfig = field(default_factory=PipelineConfig)
    simulation: SimulationConfig = field(default_factory=SimulationConfig)


def _bool(text: str) -> bool:
    t = text.lower()
    if t in ("true", "yes", "on", "1"):
        return True
    if t in ("false", "no", "off", "0"):
        return False
    raise ValueError(f"expected a boolean, got {text!r}")


def _int(text: str) -> int:
    return int(text, 10)


def _choice(*options):
    def parse(text: str) -> str:
        if text not in options:
            raise ValueError(f"expected one of {', '.join(options)}, got {text!r}")
        return text

    return parse


# dotted key -> (section, attribute, parser)
KEYS: dict[str, tuple[str, str, object]] = {
    "map.side_length": ("pipeline", "map_side_length", float),
    "map.cell_size": ("pipeline", "map_cell_size", float),
    "map.levels": ("pipeline", "map_levels", _int),
    "map.backend": ("pipeline", "map_backend", _choice(*BACKENDS)),
    "map.max_keyframes": ("pipeline", "max_keyframes", _int),
    "map.keyframe_distance": ("pipeline", "keyframe_distance", float),
    "spline.order": ("pipeline", "spline_order", _int),
    "spline.window_scans": ("pipeline", "window_scans", _int),
    "spline.t_pred": ("pipeline", "t_pred", float),
    "reg.sigma_scale": ("registration", "sigma_scale", float),
    "reg.outlier_prior": ("registration", "outlier_prior", float),
    "reg.em_iters": ("registration", "em_max_iterations", _int),
    "reg.lm_iters": ("registration", "lm_max_iterations", _int),
    "select.theta_planar": ("selection", "theta_planar", float),
    "select.theta_scale": ("selection", "theta_scale", float),
    "select.theta_degenerate": ("selection", "theta_degenerate", float),
    "select.theta_normal": ("selection", "theta_normal", float),
    "select.enabled": ("selection", "enabled", _bool),
    "sim.seed": ("simulation", "seed", _int),
    "sim.duration": ("simulation", "duration", float),
    "sim.trajectory": ("simulation", "trajectory", _choice("static", "line", "circle", "figure_eight")),
    "sim.trajectory_period": ("simulation", "trajectory_period", float),
    "sim.trajectory_scale": ("simulation", "trajectory_scale", float),
    "sim.room_extent": ("simulation", "room_extent", float),
    "sim.beams": ("simulation", "beams", _int),
    "sim.elevation_min_deg": ("simulation", "elevation_min_deg", float),
    "sim.elevation_max_deg": ("simulation", "elevation_max_deg", float),
    "sim.azimuth_steps": ("simulation", "azimuth_steps", _int),
    "sim.max_range": ("simulation", "max_range", float),
    "sim.scan_period": ("simulation", "scan_period", float),
    "sim.range_noise": ("simulation", "range_noise", float),
}


def _check_selection(sel: SelectionConfig) -> None:
    for name in ("theta_planar", "theta_scale", "theta_degenerate"):
        v = getattr(sel, name)
        if not 0.0 <= v <= 1.0:
            raise ValueError(f"select.{name} must lie in [0, 1]")
    if not 0.0 <= sel.theta_normal <= 1.0:
        raise ValueError("select.theta_normal must lie in [0, 1]")


def build_config(values: dict[str, str]) -> Config:
    """Validated configuration from raw ``{dotted key: text}`` pairs."""
    groups: dict[str, dict] = {"pipeline": {}, "registration": {}, "selection": {}, "simulation": {}}
    for key, text in values.items():
        if key not in KEYS:
            raise ConfigError(f"unknown configuration key {key!r}")
        section, attr, parse = KEYS[key]
        try:
            value = parse(text)
        except ValueError as exc:
            raise ConfigError(f"{key}: {exc}") from None
        if isinstance(value, float) and not math.isfinite(value):
            raise ConfigError(f"{key}: value must be finite")
        groups[section][attr] = value
    try:
        selection = SelectionConfig(**groups["selection"])
        _check_selection(selection)
        registration = RegistrationConfig(**groups["registration"])
        pipeline = PipelineConfig(registration=registration, selection=selection, **groups["pipeline"])
        pipeline.new_map()  # map geometry checks
        simulation = SimulationConfig(**groups["simulation"])
    except (ValueError, TypeError) as exc:
        raise ConfigError(str(exc)) from None
    return Config(pipeline, simulation)


def parse_config(text: str, source: str = "<config>") -> Config:
    values: dict[str, str] = {}
    for no, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, value = line.partition("=")
        key, value = key.strip(), value.strip()
        if not sep or not key or not value:
            raise ConfigError(f"{source}:{no}: expected 'key = value'")
        if key in values:
            raise ConfigError(f"{source}:{no}: duplicate key {key!r}")
        values[key] = value
    return build_config(values)


def load_config(path) -> Config:
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc.strerror or exc}") from None
    return parse_config(text, str(path))


def config_to_text(config: Config) -> str:
    """Render every key; parsing the result reproduces ``config``."""
    sections = {
        "pipeline": config.pipeline,
        "registration": config.pipeline.registration,
        "selection": config.pipeline.selection,
        "simulation": config.simulation,
    }
    lines = []
    for key, (section, attr, _) in KEYS.items():
        v = getattr(sections[section], attr)
        lines.append(f"{key} = {str(v).lower() if isinstance(v, bool) else v!r}".replace("'", ""))
    return "\n".join(lines) + "\n"
