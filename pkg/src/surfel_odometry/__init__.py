"""Continuous-time LiDAR odometry on multi-resolution surfel maps."""

from .config import Config, ConfigError, load_config, parse_config
from .evaluation import associate, align_ate, ate_rmse
from .lie import RigidTransform, exp_so3, log_so3
from .pipeline import Odometry, PipelineConfig, ScanFrame, ScanResult, run_odometry
from .registration import RegistrationConfig
from .multires import LocalMultiResMap, SelectionConfig
from .simulation import GroundTruthTrajectory, SensorModel, generate_room_scene, simulate_scan, simulate_sequence
from .spline import TrajectorySpline, cumulative_blending

__all__ = [
    "Config",
    "ConfigError",
    "GroundTruthTrajectory",
    "LocalMultiResMap",
    "Odometry",
    "PipelineConfig",
    "RegistrationConfig",
    "RigidTransform",
    "ScanFrame",
    "ScanResult",
    "SelectionConfig",
    "SensorModel",
    "TrajectorySpline",
    "align_ate",
    "associate",
    "ate_rmse",
    "cumulative_blending",
    "exp_so3",
    "generate_room_scene",
    "load_config",
    "log_so3",
    "parse_config",
    "run_odometry",
    "simulate_scan",
    "simulate_sequence",
]
