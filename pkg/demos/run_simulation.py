"""Simulate a room sequence, run the odometry with both map backends and report ATE and timing.

    python3 demos/run_simulation.py [num_scans]
"""

import sys

import numpy as np

from surfel_odometry import (
    GroundTruthTrajectory,
    PipelineConfig,
    SensorModel,
    associate,
    ate_rmse,
    generate_room_scene,
    run_odometry,
    simulate_sequence,
)
from surfel_odometry.evaluation import timing_summary
from surfel_odometry.multires import SelectionConfig


def main(num_scans: int = 100) -> None:
    frames, gt = simulate_sequence(generate_room_scene(10.0), SensorModel(), GroundTruthTrajectory(), num_scans)
    print(f"{num_scans} scans, {np.mean([len(f) for f in frames]):.0f} points per scan")
    print(f"{'backend':8} {'selection':9} {'ATE [m]':>8} {'reg ms':>7} {'surfels':>8} {'EM iters':>8}")
    for backend in ("grid", "lattice"):
        for enabled in (True, False):
            cfg = PipelineConfig(map_backend=backend, selection=SelectionConfig(enabled=enabled))
            odo = run_odometry(frames, cfg)
            res = odo.results[1:]
            ate = ate_rmse(associate(odo.trajectory(), gt))
            reg = timing_summary([r.registration_time for r in res])
            print(
                f"{backend:8} {str(enabled):9} {ate:8.4f} {1e3 * reg['mean']:7.1f} "
                f"{np.mean([r.window_surfels for r in res]):8.0f} {np.mean([r.em_iterations for r in res]):8.2f}"
            )


if __name__ == "__main__":
    main(int(sys.argv[1]) if len(sys.argv) > 1 else 100)
