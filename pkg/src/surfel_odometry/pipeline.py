"""Per-scan odometry: scan surfel maps, the sliding window, registration and
keyframe maintenance of the local map.

The trajectory spline is kept in the world frame (the first scan's sensor
frame). The local map's pose ``T_ws`` converts between world and map frame.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field
from typing import Hashable

import numpy as np

from .lie import RigidTransform
from .multires import LocalMultiResMap, SelectionConfig
from .registration import MapIndex, RegistrationConfig, WindowScan, WindowState, register_window
from .spline import SUPPORTED_ORDERS, TrajectorySpline, reinit_after_shift
from .storage import BACKENDS, GRID


@dataclass
class ScanFrame:
    scan_id: Hashable
    base_timestamp: float
    points: np.ndarray  # (N, 3) sensor frame
    offsets: np.ndarray  # (N,) seconds after base_timestamp

    def __post_init__(self):
        self.points = np.asarray(self.points, dtype=float).reshape(-1, 3)
        self.offsets = np.asarray(self.offsets, dtype=float).reshape(-1)
        if len(self.points) != len(self.offsets):
            raise ValueError("points and offsets differ in length")

    def __len__(self):
        return len(self.points)


@dataclass
class PipelineConfig:
    spline_order: int = 3
    window_scans: int = 3
    t_pred: float = 0.1
    keyframe_distance: float = 0.5
    max_keyframes: int = 4
    map_side_length: float = 32.0
    map_cell_size: float = 2.0
    map_levels: int = 3
    map_backend: str = GRID
    registration: RegistrationConfig = field(default_factory=RegistrationConfig)
    selection: SelectionConfig = field(default_factory=SelectionConfig)

    def __post_init__(self):
        if self.spline_order not in SUPPORTED_ORDERS:
            raise ValueError(f"spline order must be one of {SUPPORTED_ORDERS}")
        if self.window_scans < 1:
            raise ValueError("window must hold at least one scan")
        if self.t_pred <= 0:
            raise ValueError("t_pred must be positive")
        if self.map_backend not in BACKENDS:
            raise ValueError(f"unknown backend {self.map_backend!r}")
        if self.max_keyframes < 1:
            raise ValueError("max_keyframes must be >= 1")
        if not self.keyframe_distance > 0:
            raise ValueError("keyframe_distance must be positive")

    def new_map(self) -> LocalMultiResMap:
        return LocalMultiResMap(
            self.map_side_length,
            self.map_cell_size,
            self.map_levels,
            self.map_backend,
            max_keyframes=self.max_keyframes,
        )


@dataclass
class ScanResult:
    scan_id: Hashable
    timestamp: float
    pose: RigidTransform
    predicted: RigidTransform
    low_confidence: bool = False
    registration_time: float = 0.0
    total_time: float = 0.0
    window_surfels: int = 0
    scan_surfels: int = 0
    em_iterations: int = 0
    lm_iterations: int = 0
    pairs: int = 0
    nll: list = field(default_factory=list)
    keyframe: bool = False
    shift: tuple = (0, 0, 0)


@dataclass
class _WindowEntry:
    scan: WindowScan
    frame: ScanFrame


class Odometry:
    """Mutable odometry state; feed frames in timestamp order to ``process_scan``."""

    def __init__(self, config: PipelineConfig | None = None):
        self.config = config or PipelineConfig()
        self.local_map = self.config.new_map()
        self.window: list[_WindowEntry] = []
        self.spline: TrajectorySpline | None = None
        self.shifted_out_time: float | None = None
        self.last_keyframe: RigidTransform | None = None
        self.results: list[ScanResult] = []
        self._index: MapIndex | None = None
        self._index_version = -1

    # -- helpers -------------------------------------------------------------

    def scan_surfels(self, frame: ScanFrame):
        """Selected surfels of the frame's own map, built at identity."""
        scan_map = self.config.new_map()
        scan_map.integrate_scan(frame.points, RigidTransform.identity(), frame.scan_id)
        surfels, _ = scan_map.select_surfels(self.config.selection)
        return surfels

    def map_index(self) -> MapIndex:
        if self._index is None or self._index_version != self.local_map.version:
            self._index = MapIndex(self.local_map)
            self._index_version = self.local_map.version
        return self._index

    def _knots(self) -> tuple[float, float]:
        t_last = self.window[-1].scan.timestamp
        if self.shifted_out_time is not None:
            t0 = self.shifted_out_time
        else:
            t0 = self.window[0].scan.timestamp - self.config.t_pred
        return t0, t_last + self.config.t_pred - t0

    def _integrate_keyframe(self, frame: ScanFrame, pose_world: RigidTransform) -> None:
        pose_map = self.local_map.map_pose.inverse() @ pose_world
        self.local_map.integrate_scan(frame.points, pose_map, frame.scan_id)
        self.local_map.enforce_window()
        self.last_keyframe = pose_world

    # -- public API ------------------------------------------------------------

    def bootstrap(self, frame: ScanFrame) -> ScanResult:
        if self.spline is not None or self.window:
            raise RuntimeError("odometry already initialized")
        t_start = time.perf_counter()
        cfg = self.config
        surfels = self.scan_surfels(frame)
        self.window.append(_WindowEntry(WindowScan(frame.scan_id, frame.base_timestamp, surfels), frame))
        t0, dt = self._knots()
        self.spline = TrajectorySpline.constant(cfg.spline_order, t0, dt)
        self._integrate_keyframe(frame, RigidTransform.identity())
        res = ScanResult(
            frame.scan_id,
            frame.base_timestamp,
            RigidTransform.identity(),
            RigidTransform.identity(),
            scan_surfels=len(surfels),
            keyframe=True,
            total_time=time.perf_counter() - t_start,
        )
        self.results.append(res)
        return res

    def process_scan(self, frame: ScanFrame) -> ScanResult:
        if self.spline is None:
            return self.bootstrap(frame)
        t_l = frame.base_timestamp
        if t_l <= self.window[-1].scan.timestamp:
            raise ValueError("scan timestamps must be strictly increasing")
        t_start = time.perf_counter()
        cfg = self.config
        prev = self.spline

        surfels = self.scan_surfels(frame)
        self.window.append(_WindowEntry(WindowScan(frame.scan_id, t_l, surfels), frame))
        while len(self.window) > cfg.window_scans:
            self.shifted_out_time = self.window.pop(0).scan.timestamp
        t0, dt = self._knots()
        samples = [(e.scan.timestamp, prev.evaluate(e.scan.timestamp, extrapolate=True)) for e in self.window]
        spline = reinit_after_shift(samples, t0, dt, cfg.spline_order, warm_start=prev).spline

        window = WindowState([e.scan for e in self.window], spline)
        t_reg = time.perf_counter()
        registered, diag = register_window(window, self.map_index(), cfg.registration)
        t_reg = time.perf_counter() - t_reg
        low_conf = diag.unconstrained
        self.spline = spline if low_conf else registered

        pose = self.spline.evaluate(t_l)
        predicted = self.spline.evaluate(t_l + cfg.t_pred)
        keyframe = False
        if np.linalg.norm(pose.translation - self.last_keyframe.translation) > cfg.keyframe_distance:
            self._integrate_keyframe(frame, pose)
            keyframe = True
        pose_map = self.local_map.map_pose.inverse() @ pose
        shift = self.local_map.maybe_shift(pose_map)

        res = ScanResult(
            frame.scan_id,
            t_l,
            pose,
            predicted,
            low_confidence=low_conf,
            registration_time=t_reg,
            total_time=time.perf_counter() - t_start,
            window_surfels=diag.surfel_count,
            scan_surfels=len(surfels),
            em_iterations=diag.em_iterations,
            lm_iterations=sum(diag.lm_iterations),
            pairs=diag.association_counts[-1] if diag.association_counts else 0,
            nll=list(diag.negative_log_likelihood),
            keyframe=keyframe,
            shift=tuple(int(v) for v in shift),
        )
        self.results.append(res)
        return res

    def trajectory(self) -> list[tuple[float, RigidTransform]]:
        return [(r.timestamp, r.pose) for r in self.results]


def run_odometry(frames, config: PipelineConfig | None = None) -> Odometry:
    odo = Odometry(config)
    for frame in frames:
        odo.process_scan(frame)
    return odo
