import json
import subprocess
import sys

import numpy as np
import pytest

from priorloc.cli import EXIT_DATA, EXIT_NUMERIC, EXIT_OK, EXIT_USAGE, main
from priorloc.pipeline.config import load_config
from priorloc.pipeline.dataset import read_tum, write_tum
from priorloc.pipeline.simulate import SceneSpec, save_scene_spec

SMALL = SceneSpec(kind="room", length=6.0, hall_size=5.0, pause=1.0, n_beams=8, azimuth_step_deg=4.0)


@pytest.fixture(scope="module")
def small(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    save_scene_spec(SMALL, root / "scene.ini")
    assert main(["simulate", "--spec", str(root / "scene.ini"), "--out", str(root / "data")]) == EXIT_OK
    return root


@pytest.fixture(scope="module")
def small_run(small):
    out = small / "run"
    assert main(["run", "--config", str(small / "data" / "config.ini"), "--out", str(out)]) == EXIT_OK
    return out


def test_simulate_writes_a_runnable_dataset(small):
    data = small / "data"
    for name in ("config.ini", "scene.ini", "prior_map.pcd", "frames.csv", "imu.csv", "odometry.txt",
                 "ground_truth.txt", "gt_map.pcd"):
        assert (data / name).is_file(), name
    cfg = load_config(data / "config.ini")
    assert cfg.path("odometry") == data / "odometry.txt"


def test_run_outputs(small_run):
    for name in ("trajectory.txt", "odometry.txt", "covariances.csv", "map.pcd", "frames.json", "summary.json",
                 "factors.jsonl"):
        assert (small_run / name).is_file(), name
    summary = json.loads((small_run / "summary.json").read_text())
    t, poses = read_tum(small_run / "trajectory.txt")
    assert len(poses) == summary["keyframes"]
    assert "runtime_s" not in summary


def test_evaluate_trajectory_and_map(small, small_run, tmp_path, capsys):
    data = small / "data"
    assert main(["evaluate", "--est", str(small_run / "trajectory.txt"), "--gt", str(data / "ground_truth.txt"),
                 "--out", str(tmp_path / "t.json")]) == EXIT_OK
    rep = json.loads(capsys.readouterr().out)
    assert rep == json.loads((tmp_path / "t.json").read_text())
    assert 0 <= rep["ate_rmse"] < 0.05
    assert main(["evaluate", "--est", str(small_run / "map.pcd"), "--gt", str(data / "gt_map.pcd"),
                 "--error-map", str(tmp_path / "err.pcd")]) == EXIT_OK
    rep = json.loads(capsys.readouterr().out)
    assert rep["ac"] < 0.05 and 0 < rep["inlier_ratio"] <= 1
    assert (tmp_path / "err.pcd").is_file()


def test_report_writes_plots_and_summary(small_run, capsys):
    assert main(["report", "--run", str(small_run)]) == EXIT_OK
    summary = json.loads(capsys.readouterr().out)
    for name in ("degeneracy.svg", "trajectory.svg", "report.json"):
        assert (small_run / name).stat().st_size > 0
    assert summary == json.loads((small_run / "report.json").read_text())


def test_usage_errors_exit_1(tmp_path, capsys):
    assert main(["run", "--config", "x.ini"]) == EXIT_USAGE  # missing --out
    assert main(["frobnicate"]) == EXIT_USAGE
    assert main(["evaluate", "--est", "a.pcd", "--gt", "b.txt"]) == EXIT_USAGE
    assert "error" in capsys.readouterr().err


def test_missing_or_malformed_data_exit_2(small, tmp_path, capsys):
    assert main(["run", "--config", str(tmp_path / "missing.ini"), "--out", str(tmp_path / "o")]) == EXIT_DATA
    bad = tmp_path / "o.txt"
    bad.write_text("0 1 2 3\n")
    assert main(["evaluate", "--est", str(bad), "--gt", str(bad)]) == EXIT_DATA
    assert "o.txt:1" in capsys.readouterr().err


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_overflowing_odometry_covariance_exits_3(small, tmp_path, capsys):
    import shutil

    data = tmp_path / "data"
    shutil.copytree(small / "data", data)
    t, poses = read_tum(data / "odometry.txt")
    # valid per row, but accumulating two increments overflows to inf
    write_tum(data / "odometry.txt", t, poses, np.tile(1e308 * np.eye(6), (len(t), 1, 1)))
    code = main(["run", "--config", str(data / "config.ini"), "--out", str(tmp_path / "o"), "--no-dm", "--no-gf",
                 "--no-nm", "--no-lc"])
    assert code == EXIT_NUMERIC
    assert "numerical failure" in capsys.readouterr().err


def test_module_entry_point_matches_main():
    proc = subprocess.run([sys.executable, "-m", "priorloc", "--help"], capture_output=True, text=True)
    assert proc.returncode == 0
    for cmd in ("run", "evaluate", "simulate", "report"):
        assert cmd in proc.stdout
