"""Synthetic scenes, a spinning LiDAR model and analytic ground-truth motion."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .lie import RigidTransform, exp_so3
from .pipeline import ScanFrame


@dataclass
class Patch:
    """Parallelogram ``origin + a e1 + b e2`` with ``a, b`` in [0, 1]."""

    origin: np.ndarray
    edge1: np.ndarray
    edge2: np.ndarray

    def __post_init__(self):
        self.origin = np.asarray(self.origin, dtype=float)
        self.edge1 = np.asarray(self.edge1, dtype=float)
        self.edge2 = np.asarray(self.edge2, dtype=float)
        if np.linalg.norm(np.cross(self.edge1, self.edge2)) < 1e-12:
            raise ValueError("patch edges must be linearly independent")

    def intersect(self, o: np.ndarray, d: np.ndarray) -> np.ndarray:
        n = np.cross(self.edge1, self.edge2)
        denom = d @ n
        with np.errstate(divide="ignore", invalid="ignore"):
            t = ((self.origin - o) @ n) / denom
            h = o + t[:, None] * d - self.origin
        G = np.array([[self.edge1 @ self.edge1, self.edge1 @ self.edge2],
                      [self.edge1 @ self.edge2, self.edge2 @ self.edge2]])
        ab = np.linalg.solve(G, np.stack([h @ self.edge1, h @ self.edge2]))
        inside = (ab >= -1e-12).all(axis=0) & (ab <= 1 + 1e-12).all(axis=0)
        ok = np.isfinite(t) & (t > 1e-9) & inside & (np.abs(denom) > 1e-15)
        return np.where(ok, t, np.inf)


@dataclass
class Box:
    lo: np.ndarray
    hi: np.ndarray

    def __post_init__(self):
        self.lo = np.asarray(self.lo, dtype=float)
        self.hi = np.asarray(self.hi, dtype=float)

    def intersect(self, o: np.ndarray, d: np.ndarray) -> np.ndarray:
        with np.errstate(divide="ignore", invalid="ignore"):
            inv = 1.0 / d
            t1 = (self.lo - o) * inv
            t2 = (self.hi - o) * inv
        tmin = np.nanmax(np.minimum(t1, t2), axis=1)
        tmax = np.nanmin(np.maximum(t1, t2), axis=1)
        ok = (tmax >= tmin) & (tmin > 1e-9)
        return np.where(ok, tmin, np.inf)


@dataclass
class Scene:
    patches: list[Patch] = field(default_factory=list)
    boxes: list[Box] = field(default_factory=list)

    @property
    def primitives(self):
        return [*self.patches, *self.boxes]

    def cast(self, origins: np.ndarray, directions: np.ndarray, max_range: float = np.inf) -> np.ndarray:
        """Distance to the nearest hit along each unit ray, ``inf`` on a miss."""
        best = np.full(len(origins), np.inf)
        for prim in self.primitives:
            best = np.minimum(best, prim.intersect(origins, directions))
        best[best > max_range] = np.inf
        return best


def generate_room_scene(extent: float = 10.0, height: float | None = None) -> Scene:
    """Closed ``extent x extent`` room (floor at z=0) with asymmetric boxes inside."""
    if extent <= 0:
        raise ValueError("extent must be positive")
    h = 0.35 * extent if height is None else height
    e = extent / 2.0
    X, Y, Z = np.eye(3)
    L = 2 * e
    patches = [
        Patch([-e, -e, 0.0], L * X, L * Y),  # floor
        Patch([-e, -e, h], L * X, L * Y),  # ceiling
        Patch([-e, -e, 0.0], L * Y, h * Z),  # x = -e
        Patch([e, -e, 0.0], L * Y, h * Z),  # x = +e
        Patch([-e, -e, 0.0], L * X, h * Z),  # y = -e
        Patch([-e, e, 0.0], L * X, h * Z),  # y = +e
    ]
    s = extent / 10.0
    boxes = [
        Box(np.array([1.5, -3.5, 0.0]) * s, np.array([2.6, -2.0, 1.2]) * s),
        Box(np.array([-3.6, 1.0, 0.0]) * s, np.array([-2.5, 2.2, 2.0]) * s),
        Box(np.array([2.8, 2.4, 0.0]) * s, np.array([3.7, 3.6, 0.8]) * s),
        Box(np.array([-1.2, -4.2, 0.0]) * s, np.array([-0.7, -3.7, h / s]) * s),
        # table-height boxes: horizontal faces below the sensor
        Box(np.array([-3.8, -3.0, 0.0]) * s, np.array([-2.2, -1.8, 0.9]) * s),
        Box(np.array([0.5, 3.0, 0.0]) * s, np.array([2.0, 4.2, 1.0]) * s),
        Box(np.array([3.4, -1.0, 0.0]) * s, np.array([4.3, 0.6, 0.7]) * s),
    ]
    return Scene(patches, boxes)


@dataclass
class SensorModel:
    elevations: np.ndarray = field(default_factory=lambda: np.deg2rad(np.linspace(-15.0, 15.0, 16)))
    azimuth_steps: int = 360
    max_range: float = 16.0
    scan_period: float = 0.1
    range_noise: float = 0.0

    def __post_init__(self):
        self.elevations = np.asarray(self.elevations, dtype=float)
        if self.azimuth_steps < 1:
            raise ValueError("azimuth_steps must be >= 1")
        if not self.max_range > 0:
            raise ValueError("max_range must be positive")

    def directions(self, azimuth: float) -> np.ndarray:
        ce = np.cos(self.elevations)
        return np.stack(
            [ce * math.cos(azimuth), ce * math.sin(azimuth), np.sin(self.elevations)], axis=1
        )


def _euler_zyx(yaw, pitch, roll) -> np.ndarray:
    return exp_so3([0, 0, yaw]) @ exp_so3([0, pitch, 0]) @ exp_so3([roll, 0, 0])


@dataclass
class GroundTruthTrajectory:
    """Analytic sensor motion.

    ``kind`` is one of ``static``, ``line``, ``circle`` or ``figure_eight``;
    ``center`` anchors the curve, ``scale`` its size in meters and ``period``
    the duration of one loop. Yaw oscillates with ``yaw_amplitude``; small roll
    and pitch oscillations keep all rotation axes excited.
    """

    kind: str = "figure_eight"
    center: tuple = (0.0, 0.0, 1.5)
    scale: float = 1.0
    period: float = 20.0
    yaw_amplitude: float = 0.25
    tilt_amplitude: float = 0.03
    velocity: tuple = (0.3, 0.0, 0.0)

    def __post_init__(self):
        if self.kind not in ("static", "line", "circle", "figure_eight"):
            raise ValueError(f"unknown trajectory kind {self.kind!r}")

    def position(self, t: float) -> np.ndarray:
        c = np.asarray(self.center, dtype=float)
        w = 2 * math.pi / self.period
        if self.kind == "static":
            return c.copy()
        if self.kind == "line":
            return c + t * np.asarray(self.velocity, dtype=float)
        if self.kind == "circle":
            return c + self.scale * np.array([math.cos(w * t) - 1.0, math.sin(w * t), 0.0])
        return c + self.scale * np.array(
            [math.sin(w * t), 0.5 * math.sin(2 * w * t), 0.1 * math.sin(w * t)]
        )

    def rotation(self, t: float) -> np.ndarray:
        if self.kind in ("static", "line"):
            return np.eye(3)
        w = 2 * math.pi / self.period
        return _euler_zyx(
            self.yaw_amplitude * math.sin(w * t),
            self.tilt_amplitude * math.cos(w * t),
            self.tilt_amplitude * math.sin(2 * w * t),
        )

    def pose(self, t: float) -> RigidTransform:
        return RigidTransform(self.rotation(t), self.position(t))

    def max_speed(self, duration: float | None = None, samples: int = 2000) -> float:
        """Numerical bound on the linear speed over one period (or ``duration``)."""
        T = duration or self.period
        ts = np.linspace(0.0, T, samples)
        h = 1e-5
        v = [np.linalg.norm(self.position(t + h) - self.position(t - h)) / (2 * h) for t in ts]
        return float(max(v))


def simulate_scan(
    scene: Scene,
    sensor: SensorModel,
    trajectory: GroundTruthTrajectory,
    start_time: float,
    scan_id=0,
    rng: np.random.Generator | None = None,
) -> tuple[ScanFrame, RigidTransform]:
    """Cast one sweep; each azimuth column uses the pose at its own firing time."""
    A = sensor.azimuth_steps
    B = len(sensor.elevations)
    offsets = np.arange(A) / A * sensor.scan_period
    local_dirs, origins, world_dirs = [], [], []
    for a in range(A):
        pose = trajectory.pose(start_time + offsets[a])
        dirs = sensor.directions(2 * math.pi * a / A)
        local_dirs.append(dirs)
        world_dirs.append(dirs @ pose.rotation.T)
        origins.append(np.repeat(pose.translation[None], B, axis=0))
    local_dirs = np.concatenate(local_dirs)
    ranges = scene.cast(np.concatenate(origins), np.concatenate(world_dirs), sensor.max_range)
    t_off = np.repeat(offsets, B)
    hit = np.isfinite(ranges)
    r = ranges[hit]
    if sensor.range_noise > 0:
        rng = rng or np.random.default_rng()
        r = r + rng.normal(0.0, sensor.range_noise, size=r.shape)
    points = local_dirs[hit] * r[:, None]
    frame = ScanFrame(scan_id, float(start_time), points, t_off[hit])
    return frame, trajectory.pose(start_time)


def simulate_sequence(
    scene: Scene,
    sensor: SensorModel,
    trajectory: GroundTruthTrajectory,
    num_scans: int,
    start_time: float = 0.0,
    seed: int | None = 0,
):
    """``num_scans`` consecutive sweeps; returns (frames, ground-truth [(t, pose)])."""
    rng = np.random.default_rng(seed)
    frames, gt = [], []
    for i in range(num_scans):
        t = start_time + i * sensor.scan_period
        frame, pose = simulate_scan(scene, sensor, trajectory, t, scan_id=i, rng=rng)
        frames.append(frame)
        gt.append((t, pose))
    return frames, gt
