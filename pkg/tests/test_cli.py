import subprocess
import sys

import numpy as np
import pytest

from nsvd import io
from nsvd.cli import EXIT_CONFIG, EXIT_NUMERIC, EXIT_OK, EXIT_VERIFY, main

SMALL = [
    "grid.n=8",
    "time.steps=6",
    "time.T=0.3",
    "output.snapshot_every=3",
]


def run(tmp_path, command, *extra, name="run"):
    out = tmp_path / name
    args = [command, "--output", str(out)]
    for item in SMALL + list(extra):
        args += ["--override", item]
    return main(args), out


def read_back(path):
    if path.suffix == ".csv":
        return io.read_csv(path)
    if path.suffix == ".bin":
        return io.read_snapshot(path)
    if path.name == "manifest.txt":
        return io.read_manifest(path)
    return io.read_kv(path)


def assert_artifacts_round_trip(out):
    files = [p for p in out.rglob("*") if p.is_file()]
    assert files
    for p in files:
        read_back(p)
    assert io.verify_manifest(out) == []


def test_simulate_zero_data_gives_zero_energy(tmp_path):
    code, out = run(tmp_path, "simulate", "initial.kind=zero")
    assert code == EXIT_OK
    cols, rows = io.read_csv(out / "energy.csv")
    assert cols == list(io.ENERGY_COLUMNS) and len(rows) == 7
    assert all(row[5] == 0.0 for row in rows)
    snaps = sorted((out / "snapshots").glob("*.bin"))
    assert [p.name for p in snaps] == ["state_00000.bin", "state_00003.bin", "state_00006.bin"]
    assert not np.any(io.read_snapshot(snaps[-1]).values)
    assert io.read_kv(out / "config.txt")["initial.kind"] == "zero"
    assert_artifacts_round_trip(out)


def test_simulate_taylor_green_energy_monotone(tmp_path):
    code, out = run(tmp_path, "simulate", "initial.kind=taylor-green")
    assert code == EXIT_OK
    energy = [row[5] for row in io.read_csv(out / "energy.csv")[1]]
    assert energy[0] > 0 and np.all(np.diff(energy) < 0)
    summary = io.read_kv(out / "summary.txt")
    assert summary["max_scheme_residual_relative"] <= 1e-10


def test_invalid_exponent_exits_with_config_error(tmp_path, capsys):
    code, _ = run(tmp_path, "simulate", "model.r=0.5")
    assert code == EXIT_CONFIG
    assert "r >= 1" in capsys.readouterr().err


def test_unknown_key_and_missing_file_exit_2(tmp_path):
    assert run(tmp_path, "simulate", "model.gamma=1")[0] == EXIT_CONFIG
    assert main(["simulate", "--config", str(tmp_path / "missing.ini")]) == EXIT_CONFIG
    assert main(["simulate", "--seed", "-3", "--output", str(tmp_path / "s")]) == EXIT_CONFIG


def test_blowup_exits_3_with_step(tmp_path, capsys):
    code, _ = run(tmp_path, "simulate", "control.kind=random", "control.amplitude=1e6", "run.blowup_bound=10")
    assert code == EXIT_NUMERIC
    assert "step" in capsys.readouterr().err


def test_optimize_artifacts(tmp_path):
    code, out = run(tmp_path, "optimize", "optimizer.max_iters=5", "cost.lambda=0.01")
    assert code == EXIT_OK
    cols, rows = io.read_csv(out / "iterations.csv")
    assert cols == list(io.ITERATION_COLUMNS) and rows[0][0] == 0
    report = io.read_kv(out / "report.txt")
    assert report["status"] in ("CONVERGED", "NOT_CONVERGED")
    assert report["cost"] == rows[-1][1]
    assert report["global_status"] == "UNKNOWN"
    assert not (out / "bang_bang.txt").exists()
    assert io.read_snapshot(out / "costate_00000.bin").magic == io.ADJOINT_MAGIC
    assert sorted(p.name for p in (out / "controls").iterdir()) == ["control_00000.bin", "control_00003.bin", "control_00005.bin"]
    assert_artifacts_round_trip(out)


def test_optimize_not_converged_still_exits_zero(tmp_path):
    code, out = run(tmp_path, "optimize", "optimizer.max_iters=1", "optimizer.tol_vi=0")
    assert code == EXIT_OK
    assert io.read_kv(out / "report.txt")["status"] == "NOT_CONVERGED"


def test_optimize_reaches_tolerance(tmp_path):
    code, out = run(tmp_path, "optimize", "optimizer.max_iters=200", "optimizer.tol_vi=1e-6", "cost.lambda=0.1")
    report = io.read_kv(out / "report.txt")
    assert code == EXIT_OK and report["status"] == "CONVERGED"
    assert report["vi_residual"] <= 1e-6


def test_optimize_bang_bang_artifact(tmp_path):
    code, out = run(tmp_path, "optimize", "cost.lambda=0", "optimizer.max_iters=5", "box.u_min=-0.1", "box.u_max=0.1")
    assert code == EXIT_OK
    bb = io.read_kv(out / "bang_bang.txt")
    assert set(bb) == {"threshold", "count_min", "count_max", "count_undetermined", "consistency"}
    assert bb["count_min"] + bb["count_max"] + bb["count_undetermined"] == 6 * 3 * 8**3
    assert 0.0 <= bb["consistency"] <= 1.0


def test_optimize_soc_and_global_constants(tmp_path):
    code, out = run(
        tmp_path, "optimize", "optimizer.max_iters=3", "optimizer.soc_samples=2", "constants.C=1e-6", "constants.C_r=1", "constants.C_hat=1"
    )
    report = io.read_kv(out / "report.txt")
    assert code == EXIT_OK and report["soc_sample_count"] == sum(k.startswith("soc_curvature_") for k in report)
    assert report["global_status"] in ("SATISFIED", "NOT-SATISFIED")


def test_optimize_is_deterministic(tmp_path):
    extra = ("optimizer.max_iters=4", "control.kind=random")
    _, a = run(tmp_path, "optimize", *extra, name="a")
    _, b = run(tmp_path, "optimize", *extra, name="b")
    _, c = run(tmp_path, "optimize", *extra, "run.seed=1", name="c")
    assert (a / "iterations.csv").read_bytes() == (b / "iterations.csv").read_bytes()
    assert (a / "iterations.csv").read_bytes() != (c / "iterations.csv").read_bytes()


def test_gradient_check_table(tmp_path, capsys):
    code, out = run(tmp_path, "gradient-check", "control.kind=random")
    assert code == EXIT_OK
    cols, rows = io.read_csv(out / "gradient_check.csv")
    assert cols[:2] == ["eps", "taylor_remainder"] and [r[0] for r in rows] == [1e-1, 1e-2, 1e-3, 1e-4]
    assert io.read_kv(out / "summary.txt")["min_taylor_order"] >= 1.9
    assert "Taylor" in capsys.readouterr().out


VERIFY = ("verify.damping_points=200", "verify.duality_instances=2")


def test_verify_passes(tmp_path, capsys):
    code, out = run(tmp_path, "verify", *VERIFY)
    assert code == EXIT_OK
    report = io.read_kv(out / "report.txt")
    assert report["all_pass"] is True
    assert report["adjoint_duality.pass"] is True
    assert "FAIL" not in capsys.readouterr().out


def test_verify_corrupted_adjoint_fails(tmp_path, capsys):
    out = tmp_path / "bad"
    args = ["verify", "--corrupt-adjoint", "--output", str(out)]
    for item in SMALL + list(VERIFY):
        args += ["--override", item]
    assert main(args) == EXIT_VERIFY
    assert "adjoint_duality" in capsys.readouterr().err
    assert io.read_kv(out / "report.txt")["all_pass"] is False


def test_module_entry_point(tmp_path):
    proc = subprocess.run(
        [sys.executable, "-m", "nsvd", "simulate", "--output", str(tmp_path / "m"), "--override", "grid.n=8", "--override", "time.steps=2"],
        capture_output=True,
        text=True,
    )
    assert proc.returncode == 0, proc.stderr
    assert (tmp_path / "m" / "manifest.txt").exists()
