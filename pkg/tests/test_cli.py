import numpy as np
import pytest

from surfel_odometry.cli import EXIT_OK, EXIT_RUNTIME, EXIT_USAGE, main
from surfel_odometry.evaluation import associate, ate_rmse
from surfel_odometry.io import list_scan_files, read_trajectory

SIM = "sim.duration = 0.8\nsim.azimuth_steps = 180\n"


@pytest.fixture(scope="module")
def sim_dir(tmp_path_factory):
    d = tmp_path_factory.mktemp("sim")
    cfg = d / "sim.cfg"
    cfg.write_text(SIM)
    assert main(["-q", "simulate", "--config", str(cfg), str(d / "out")]) == EXIT_OK
    return d / "out", cfg


def test_simulate_writes_scans_and_ground_truth(sim_dir):
    out, _ = sim_dir
    assert len(list_scan_files(out)) == 8
    assert len(read_trajectory(out / "groundtruth.txt")) == 8


def test_simulate_is_seed_deterministic(sim_dir, tmp_path):
    out, cfg = sim_dir
    assert main(["-q", "simulate", "--config", str(cfg), str(tmp_path / "again")]) == EXIT_OK
    for a in sorted(out.iterdir()):
        assert (tmp_path / "again" / a.name).read_bytes() == a.read_bytes()


def test_zero_duration_writes_no_scans(tmp_path):
    cfg = tmp_path / "c.cfg"
    cfg.write_text("sim.duration = 0\n")
    assert main(["-q", "simulate", "--config", str(cfg), str(tmp_path / "o")]) == EXIT_OK
    assert list_scan_files(tmp_path / "o") == []


def test_odometry_and_eval_plumbing(sim_dir, tmp_path, capsys):
    out, cfg = sim_dir
    traj = tmp_path / "est.txt"
    assert main(["-q", "odometry", "--config", str(cfg), str(out), str(traj)]) == EXIT_OK
    assert len(read_trajectory(traj)) == 8
    capsys.readouterr()
    assert main(["eval-ate", str(traj), str(traj)]) == EXIT_OK
    assert capsys.readouterr().out.strip() == "0.000000"
    assert main(["eval-ate", str(traj), str(out / "groundtruth.txt")]) == EXIT_OK
    lib = ate_rmse(associate(read_trajectory(traj), read_trajectory(out / "groundtruth.txt")))
    assert capsys.readouterr().out.strip() == f"{lib:.6f}"


def test_selection_toggle_changes_surfel_counts(sim_dir, tmp_path, capsys):
    out, _ = sim_dir
    counts = {}
    for flag in ("true", "false"):
        cfg = tmp_path / f"{flag}.cfg"
        cfg.write_text(f"select.enabled = {flag}\n")
        assert main(["odometry", "--config", str(cfg), str(out), str(tmp_path / f"{flag}.txt")]) == EXIT_OK
        err = capsys.readouterr().err
        counts[flag] = sum(
            int(tok.split("=")[1]) for line in err.splitlines() if "event=scan" in line
            for tok in line.split() if tok.startswith("window_surfels=")
        )
    assert 0 < counts["true"] < counts["false"]


def test_empty_scan_directory(tmp_path):
    (tmp_path / "scans").mkdir()
    cfg = tmp_path / "c.cfg"
    cfg.write_text("")
    assert main(["-q", "odometry", "--config", str(cfg), str(tmp_path / "scans"), str(tmp_path / "t.txt")]) == EXIT_RUNTIME
    assert not (tmp_path / "t.txt").exists()


def test_malformed_trajectory_names_line(tmp_path, capsys):
    good = tmp_path / "g.txt"
    good.write_text("0 0 0 0 0 0 0 1\n0.1 0 0 0 0 0 0 1\n0.2 0 0 0 0 0 0 1\n")
    bad = tmp_path / "b.txt"
    bad.write_text("0 0 0 0 0 0 0 1\n0.1 0 0 oops 0 0 0 1\n")
    assert main(["eval-ate", str(bad), str(good)]) == EXIT_RUNTIME
    assert f"{bad}:2:" in capsys.readouterr().err


@pytest.mark.parametrize(
    "argv",
    [[], ["bogus"], ["odometry", "a", "b"], ["simulate"], ["eval-ate", "only-one"]],
)
def test_usage_errors(argv):
    assert main(argv) == EXIT_USAGE


def test_bad_config_is_usage_error(tmp_path):
    cfg = tmp_path / "c.cfg"
    cfg.write_text("spline.order = 9\n")
    assert main(["-q", "simulate", "--config", str(cfg), str(tmp_path / "o")]) == EXIT_USAGE
    assert main(["-q", "simulate", "--config", str(tmp_path / "none.cfg"), str(tmp_path / "o")]) == EXIT_USAGE


def test_missing_scan_directory_is_runtime_error(tmp_path):
    cfg = tmp_path / "c.cfg"
    cfg.write_text("")
    assert main(["-q", "odometry", "--config", str(cfg), str(tmp_path / "x"), str(tmp_path / "t")]) == EXIT_RUNTIME
