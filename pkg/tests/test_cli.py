import json
import math
import subprocess
import sys

import numpy as np
import pytest

from slqlab.cli import main

from conftest import CONFIG_DIR


def run_cli(*args):
    return main([str(a) for a in args])


def test_validate_good_config_exits_zero(tmp_path):
    assert run_cli("validate", "--config", CONFIG_DIR / "tanh.json", "--out", tmp_path) == 0


def test_validate_bad_N_exits_two_naming_assumption(tmp_path, capsys):
    code = run_cli("validate", "--config", CONFIG_DIR / "bad_N.json", "--out", tmp_path)
    out = capsys.readouterr().out
    assert code == 2
    assert "A2" in out
    assert "N not uniformly positive" in out


def test_malformed_config_exits_two(tmp_path, capsys):
    bad = tmp_path / "broken.json"
    bad.write_text("{oops")
    code = run_cli("validate", "--config", bad, "--out", tmp_path)
    assert code == 2
    assert "error:" in capsys.readouterr().err


def test_unknown_flag_exits_two(tmp_path):
    with pytest.raises(SystemExit) as exc:
        run_cli("solve-ode", "--config", CONFIG_DIR / "tanh.json", "--frobnicate", "--out", tmp_path)
    assert exc.value.code == 2


def test_solve_ode_emits_closed_form_value(tmp_path, capsys):
    code = run_cli("solve-ode", "--config", CONFIG_DIR / "tanh.json",
                   "--steps", 1000, "--out", tmp_path)
    assert code == 0
    printed = capsys.readouterr().out
    value = float(printed.strip().rsplit(" ", 1)[-1])
    assert abs(value - math.tanh(1.0)) < 1e-9
    csv = (tmp_path / "riccati_path.csv").read_text().splitlines()
    assert csv[0] == "t,K11,G11"
    assert float(csv[1].split(",")[1]) == value
    manifest = json.loads((tmp_path / "manifest.json").read_text())
    assert manifest["outputs"] == ["riccati_path.csv"]
    assert manifest["command"] == "solve-ode"


def test_solve_pde_and_tree_artifacts(tmp_path):
    assert run_cli("solve-pde", "--config", CONFIG_DIR / "p2.json", "--space-nodes", 101,
                   "--wmax", 4.0, "--out", tmp_path / "pde") == 0
    assert (tmp_path / "pde" / "riccati_field.csv").exists()
    assert run_cli("solve-tree", "--config", CONFIG_DIR / "tanh.json", "--steps", 50,
                   "--out", tmp_path / "tree") == 0
    assert (tmp_path / "tree" / "tree_summary.csv").exists()


def test_simulate_and_evaluate_artifacts(tmp_path):
    assert run_cli("simulate", "--config", CONFIG_DIR / "tanh.json", "--paths", 3,
                   "--steps", 20, "--policy", "const:0.5", "--out", tmp_path / "sim") == 0
    assert (tmp_path / "sim" / "trajectories.csv").exists()
    assert (tmp_path / "sim" / "trajectory_summary.csv").exists()
    assert run_cli("evaluate", "--config", CONFIG_DIR / "tanh.json", "--paths", 50,
                   "--steps", 100, "--policy", "zero", "--out", tmp_path / "ev") == 0
    cost = json.loads((tmp_path / "ev" / "cost_estimate.json").read_text())
    assert cost["mean"] == pytest.approx(1.0, abs=1e-10)


def test_verify_passes_on_tanh(tmp_path):
    code = run_cli("verify", "--config", CONFIG_DIR / "tanh.json", "--seed", 42,
                   "--paths", 500, "--steps", 200, "--out", tmp_path)
    assert code == 0
    report = json.loads((tmp_path / "verify_report.json").read_text())
    assert report["passed"]
    by_name = {c["name"]: c for c in report["checks"]}
    assert by_name["value_match"]["details"]["z"] <= 3.0


def test_verify_outputs_byte_identical_across_threads(tmp_path):
    outs = []
    for i, threads in enumerate((1, 2)):
        out = tmp_path / f"run{i}"
        code = run_cli("verify", "--config", CONFIG_DIR / "multnoise.json", "--seed", 7,
                       "--paths", 2000, "--steps", 100, "--threads", threads, "--out", out)
        assert code == 0
        manifest = json.loads((out / "manifest.json").read_text())
        outs.append({name: (out / name).read_bytes() for name in manifest["outputs"]})
    assert outs[0] == outs[1]


def test_compare_emits_monotone_gap_table(tmp_path):
    code = run_cli("compare", "--config", CONFIG_DIR / "tanh.json", "--out", tmp_path)
    assert code == 0
    rows = (tmp_path / "convergence.csv").read_text().splitlines()[1:]
    gaps = [float(r.split(",")[-1]) for r in rows]
    assert gaps == sorted(gaps, reverse=True)


def test_policy_file_loading(tmp_path):
    grid = np.linspace(0.0, 1.0, 20)[:, None]
    policy_file = tmp_path / "u.csv"
    np.savetxt(policy_file, grid, delimiter=",")
    code = run_cli("simulate", "--config", CONFIG_DIR / "tanh.json", "--paths", 2,
                   "--steps", 20, "--policy", f"file:{policy_file}", "--out", tmp_path / "s")
    assert code == 0


def test_console_entry_point_runs():
    proc = subprocess.run(
        [sys.executable, "-m", "slqlab.cli", "--version"],
        capture_output=True, text=True,
    )
    assert proc.returncode == 0
    assert "slqlab" in proc.stdout
