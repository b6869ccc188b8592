"""Command-line entry points: ``odometry``, ``simulate`` and ``eval-ate``.

Exit codes: 0 success, 1 usage or configuration error, 2 runtime error
(unreadable or malformed input, nothing to process, failed writes).
"""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

import numpy as np

from .config import Config, ConfigError, load_config
from .evaluation import associate, ate_rmse, timing_summary
from .io import (
    FormatError,
    atomic_write_text,
    format_scan,
    format_trajectory,
    list_scan_files,
    read_scan,
    read_trajectory,
    scan_filename,
)
from .pipeline import Odometry
from .simulation import Scene, simulate_sequence

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_RUNTIME = 2

GROUND_TRUTH_FILE = "groundtruth.txt"
SCENE_FILE = "scene.txt"

log = logging.getLogger("surfel_odometry")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def _kv(**fields) -> str:
    parts = []
    for k, v in fields.items():
        if isinstance(v, float):
            v = f"{v:.6g}"
        parts.append(f"{k}={v}")
    return " ".join(parts)


def _config(path) -> Config:
    return Config() if path is None else load_config(path)


def cmd_odometry(config_path, scan_dir, output) -> int:
    cfg = _config(config_path)
    files = list_scan_files(scan_dir)
    if not files:
        raise RuntimeError(f"no scan files in {scan_dir}")
    odo = Odometry(cfg.pipeline)
    for path in files:
        r = odo.process_scan(read_scan(path))
        log.info(
            _kv(
                event="scan",
                scan=r.scan_id,
                t=r.timestamp,
                reg_ms=1e3 * r.registration_time,
                total_ms=1e3 * r.total_time,
                scan_surfels=r.scan_surfels,
                window_surfels=r.window_surfels,
                pairs=r.pairs,
                em_iters=r.em_iterations,
                lm_iters=r.lm_iterations,
                nll=r.nll[-1] if r.nll else float("nan"),
                keyframe=int(r.keyframe),
                low_confidence=int(r.low_confidence),
            )
        )
    atomic_write_text(output, format_trajectory(odo.trajectory()))
    reg = timing_summary([r.registration_time for r in odo.results[1:]])
    log.info(
        _kv(
            event="done",
            scans=len(odo.results),
            reg_mean_ms=1e3 * reg["mean"],
            reg_p95_ms=1e3 * reg["p95"],
            mean_window_surfels=float(np.mean([r.window_surfels for r in odo.results])),
            output=output,
        )
    )
    return EXIT_OK


def format_scene(scene: Scene) -> str:
    lines = ["# patch ox oy oz e1x e1y e1z e2x e2y e2z | box lox loy loz hix hiy hiz"]
    for p in scene.patches:
        lines.append("patch " + " ".join(repr(float(v)) for v in (*p.origin, *p.edge1, *p.edge2)))
    for b in scene.boxes:
        lines.append("box " + " ".join(repr(float(v)) for v in (*b.lo, *b.hi)))
    return "\n".join(lines) + "\n"


def cmd_simulate(config_path, out_dir) -> int:
    sim = _config(config_path).simulation
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    scene = sim.scene()
    frames, gt = simulate_sequence(scene, sim.sensor(), sim.ground_truth(), sim.num_scans, seed=sim.seed)
    for i, frame in enumerate(frames):
        (out / scan_filename(i)).write_text(format_scan(frame))
    (out / GROUND_TRUTH_FILE).write_text(format_trajectory(gt))
    (out / SCENE_FILE).write_text(format_scene(scene))
    log.info(_kv(event="simulated", scans=len(frames), output=out))
    return EXIT_OK


def cmd_eval_ate(estimated, ground_truth, max_dt: float = 0.01) -> int:
    pairs = associate(read_trajectory(estimated), read_trajectory(ground_truth), max_dt)
    print(f"{ate_rmse(pairs):.6f}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="surfel-odometry", description="Continuous-time surfel LiDAR odometry.")
    parser.add_argument("-q", "--quiet", action="store_true", help="suppress diagnostics on stderr")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("odometry", help="estimate the trajectory of a scan directory")
    p.add_argument("--config", required=True, help="key = value configuration file")
    p.add_argument("scan_dir")
    p.add_argument("output", help="trajectory file to write")

    p = sub.add_parser("simulate", help="write simulated scans and ground truth")
    p.add_argument("--config", required=True)
    p.add_argument("output_dir")

    p = sub.add_parser("eval-ate", help="print the ATE RMSE of an estimate in meters")
    p.add_argument("--config", help="optional; validated but not otherwise used")
    p.add_argument("--max-dt", type=float, default=0.01, help="association tolerance in seconds")
    p.add_argument("estimated")
    p.add_argument("ground_truth")
    return parser


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    logging.basicConfig(stream=sys.stderr, level=logging.WARNING if args.quiet else logging.INFO, format="%(message)s", force=True)
    try:
        if args.command == "odometry":
            return cmd_odometry(args.config, args.scan_dir, args.output)
        if args.command == "simulate":
            return cmd_simulate(args.config, args.output_dir)
        if args.config is not None:
            load_config(args.config)
        if not args.max_dt >= 0:
            raise ConfigError("--max-dt must be non-negative")
        return cmd_eval_ate(args.estimated, args.ground_truth, args.max_dt)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (FormatError, OSError, ValueError, RuntimeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
