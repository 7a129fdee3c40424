import csv
import json
import math
import subprocess
import sys

import numpy as np
import pytest

from mspduals.cli import EXIT_OK, EXIT_SOLVER, EXIT_USAGE, IoError, THREADS_ENV, emit_trace_csv, run_command
from mspduals.dual import DualTrace
from mspduals.instances import load_instance
from mspduals.model import solve_deterministic_equivalent
from mspduals.primal import BoundsTrace


@pytest.fixture
def inst_file(tmp_path):
    path = tmp_path / "inst.json"
    assert run_command(["gen-inventory", "--T", "3", "--N", "2", "--seed", "7", "-o", str(path)]) == EXIT_OK
    return path


def read_csv(path):
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def test_det_equiv_prints_one_value_and_is_repeatable(inst_file, tmp_path, capsys):
    outs = []
    for k in range(2):
        assert run_command(["det-equiv", str(inst_file), "--out", str(tmp_path / f"r{k}")]) == EXIT_OK
        outs.append(capsys.readouterr().out)
    assert outs[0] == outs[1] and len(outs[0].split()) == 1
    value, _, _ = solve_deterministic_equivalent(load_instance(inst_file))
    assert float(outs[0]) == value


def test_dual_trace_is_nonincreasing(inst_file, tmp_path):
    out = tmp_path / "dual"
    argv = ["solve-dual-pen", str(inst_file), "--gamma0", "1000", "--alpha", "1", "--iters", "30", "--out", str(out)]
    assert run_command(argv) == EXIT_OK
    ub = [float(r["ub_dual"]) for r in read_csv(out / "dual_trace.csv")]
    assert len(ub) == 30 and all(b <= a + 1e-9 for a, b in zip(ub, ub[1:]))
    value, _, _ = solve_deterministic_equivalent(load_instance(inst_file))
    assert min(ub) >= value - 1e-7
    manifest = json.loads((out / "solve-dual-pen.manifest.json").read_text())
    assert manifest["options"]["schedule"]["gamma0"] == 1000.0 and manifest["argv"] == argv
    assert set(json.loads((out / "boxes.json").read_text())) >= {"lower", "upper"}


def test_feasibility_variant_writes_its_cuts(inst_file, tmp_path):
    out = tmp_path / "feas"
    assert run_command(["solve-dual-feas", str(inst_file), "--iters", "10", "--out", str(out)]) == EXIT_OK
    for line in (out / "feasibility_cuts.jsonl").read_text().splitlines():
        assert set(json.loads(line)) == {"stage", "key", "normal", "offset", "iteration"}


def test_same_arguments_give_identical_artifacts(inst_file, tmp_path):
    for k in range(2):
        assert run_command(["solve-primal", str(inst_file), "--iters", "20", "--seed", "3",
                            "--out", str(tmp_path / f"p{k}")]) == EXIT_OK
    a, b = tmp_path / "p0", tmp_path / "p1"
    assert (a / "primal_trace.csv").read_bytes() == (b / "primal_trace.csv").read_bytes()
    ma = json.loads((a / "solve-primal.manifest.json").read_text())
    mb = json.loads((b / "solve-primal.manifest.json").read_text())
    for m in (ma, mb):
        del m["out"], m["argv"]
    assert ma == mb


def test_manifest_replays_the_run(inst_file, tmp_path):
    out = tmp_path / "o"
    assert run_command(["oracle", str(inst_file), "--nodes", "21", "--gamma", "10", "--gamma", "100",
                        "--out", str(out)]) == EXIT_OK
    first = {p.name: p.read_bytes() for p in out.iterdir()}
    assert {"oracle_gamma10_stage1.csv", "oracle_gamma100_stage2.csv"} <= set(first)
    argv = json.loads(first["oracle.manifest.json"])["argv"]
    for p in out.iterdir():
        p.unlink()
    assert run_command(argv) == EXIT_OK
    assert {p.name: p.read_bytes() for p in out.iterdir()} == first


def test_sensitivity_report_columns(tmp_path):
    path = tmp_path / "ar.json"
    assert run_command(["gen-inventory", "--T", "3", "--N", "2", "--phi", "0.3", "--mu", "2",
                        "-o", str(path)]) == EXIT_OK
    out = tmp_path / "s"
    assert run_command(["sensitivity", str(path), "--param", "mu", "--sims", "50", "--primal-iters", "10",
                        "--out", str(out)]) == EXIT_OK
    with open(out / "sensitivity.csv", newline="") as fh:
        rows = list(csv.reader(fh))
    assert rows[0] == ["param", "fd", "estimate", "gap_percent", "n_sims", "delta"]
    assert [r[0] for r in rows[1:]] == ["mu"] and rows[1][4] == "50"


@pytest.mark.parametrize("argv", [
    ["no-such-command"],
    ["det-equiv", "missing.json"],
    ["solve-primal", "{inst}", "--ub-mode", "bogus"],
    ["solve-dual-pen", "{inst}", "--gamma0", "-1"],
    ["oracle", "{inst}", "--nodes", "1"],
    ["sensitivity", "{inst}"],
    ["solve-dual-pen", "{inst}", "--boxes", "nowhere.json"],
])
def test_usage_errors_write_nothing(argv, inst_file, tmp_path, capsys):
    out = tmp_path / "never"
    argv = [a.replace("{inst}", str(inst_file)) for a in argv] + ["--out", str(out)]
    assert run_command(argv) == EXIT_USAGE
    assert not out.exists()
    captured = capsys.readouterr()
    assert captured.out == "" and "error" in captured.err


def test_invalid_instance_is_a_usage_error(inst_file, tmp_path):
    data = json.loads(inst_file.read_text())
    data["stages"][1]["realizations"][0]["probability"] = 0.9
    bad = tmp_path / "bad.json"
    bad.write_text(json.dumps(data))
    assert run_command(["det-equiv", str(bad), "--out", str(tmp_path / "x")]) == EXIT_USAGE
    assert not (tmp_path / "x").exists()


def test_oracle_rejects_vector_multipliers(tmp_path):
    path = tmp_path / "ar.json"
    run_command(["gen-inventory", "--T", "3", "--N", "2", "--phi", "0.3", "--mu", "2", "-o", str(path)])
    assert run_command(["oracle", str(path), "--out", str(tmp_path / "x")]) == EXIT_USAGE
    assert not (tmp_path / "x").exists()


def test_solver_failure_exit_code(inst_file, tmp_path):
    assert run_command(["det-equiv", str(inst_file), "--node-cap", "2", "--out", str(tmp_path)]) == EXIT_SOLVER


def test_thread_cap(inst_file, tmp_path, monkeypatch):
    monkeypatch.setenv(THREADS_ENV, "zero")
    assert run_command(["det-equiv", str(inst_file), "--out", str(tmp_path / "a")]) == EXIT_USAGE
    monkeypatch.setenv(THREADS_ENV, "4")
    assert run_command(["det-equiv", str(inst_file), "--out", str(tmp_path / "b")]) == EXIT_OK
    assert json.loads((tmp_path / "b" / "det-equiv.manifest.json").read_text())["threads"] == 4


def test_console_script_runs(inst_file, tmp_path):
    proc = subprocess.run([sys.executable, "-m", "mspduals.cli", "det-equiv", str(inst_file),
                           "--out", str(tmp_path)], capture_output=True, text=True)
    assert proc.returncode == EXIT_OK and math.isfinite(float(proc.stdout))


# ---------------------------------------------------------------- trace files


def test_empty_trace_is_header_only(tmp_path):
    emit_trace_csv(BoundsTrace(seed=0), tmp_path / "p.csv")
    emit_trace_csv(DualTrace(), tmp_path / "d.csv")
    assert (tmp_path / "p.csv").read_bytes() == b"iter,lb,ub_stat,seed\n"
    assert (tmp_path / "d.csv").read_bytes() == b"iter,ub_dual,penalty_scalar,max_zeta\n"


def test_three_iterations_give_four_lines(tmp_path):
    emit_trace_csv(DualTrace([3.0, 2.0, 1.0], [1.0] * 3, [0.0] * 3), tmp_path / "d.csv")
    assert len((tmp_path / "d.csv").read_text().splitlines()) == 4


def test_trace_values_survive_a_round_trip(tmp_path):
    rng = np.random.default_rng(0)
    lb = list(rng.standard_normal(20) * 1e3)
    ub = [math.inf] + list(rng.standard_normal(19) * 1e-7)
    emit_trace_csv(BoundsTrace(seed=1, lb=lb, ub_stat=ub), tmp_path / "p.csv")
    rows = read_csv(tmp_path / "p.csv")
    assert [float(r["lb"]) for r in rows] == lb and [float(r["ub_stat"]) for r in rows] == ub
    assert all(f"{float(r['lb']):.17g}" == f"{x:.17g}" for r, x in zip(rows, lb))


def test_unwritable_path_raises(tmp_path):
    with pytest.raises(IoError):
        emit_trace_csv(DualTrace(), tmp_path / "missing" / "d.csv")
