"""Configuration parsing, report emission, and command-line behavior."""

import math

import numpy as np
import pytest

import cmvlq.cli as cli
from cmvlq.cli import main, report_csv, run
from cmvlq.config import (
    RunConfig,
    build_coefficients,
    initial_condition,
    parse_config,
    serialize_config,
    with_overrides,
)
from cmvlq.errors import ConfigError


MINIMAL = """
[grid]
N = 2
T = 1.0

[coefficients]
n = 1
d = 1
Q = 1.0
R = 1.0
QT = 1.0
"""

FULL_2X1 = """
[run]
mode = compare
out = {out}

[grid]
N = 3
T = 0.75

[coefficients]
n = 2
d = 1
A = -0.4 0.2 ; 0.1 -0.6
F = 0.15 0.0 ; 0.05 0.1
B = 1.0 ; 0.5
H = 0.4 0.1 ; 0.0 0.3
Q = 1.2 0.1 ; 0.1 0.9
R = 0.8
QT = 1.0 0.0 ; 0.0 1.4
S = 0.05 ; 0.02
b = 0.1 -0.05
D = 0.3 0.2
D0 = 0.25 0.1
zeta = 0.02 0.01
varpi = 0.03
xi_atoms = 0.9 -0.4 ; 0.2 0.6
xi_probs = 0.35 0.65

[simulation]
n_paths = 64
seed = 7
n_common_noise = 4
dt_target = 0.02
"""


def test_minimal_config_fills_defaults():
    cfg = parse_config(MINIMAL)
    assert cfg.mode == "suite"
    assert cfg.out == "out"
    assert cfg.grid.backend == "tree"
    assert cfg.simulation.n_paths == 1000
    assert cfg.simulation.seed == 0
    assert cfg.simulation.n_common_noise == 16
    assert cfg.simulation.dt_target == 1e-3
    xi, probs = initial_condition(cfg)
    assert xi.shape == (1, 1) and xi[0, 0] == 0.0
    assert probs.tolist() == [1.0]


def test_missing_weight_named_with_section():
    with pytest.raises(ConfigError) as err:
        parse_config(MINIMAL.replace("R = 1.0\n", ""))
    assert any("[coefficients].R" in m for m in err.value.errors)


def test_round_trip_is_identity_bit_exactly():
    # awkward decimals exercise the 17-digit formatting
    text = FULL_2X1.format(out="out").replace("1.2 0.1", "0.1 0.3333333333333333")
    cfg = parse_config(text)
    again = parse_config(serialize_config(cfg))
    assert cfg == again
    a = build_coefficients(cfg)
    b = build_coefficients(again)
    assert np.array_equal(a.Q.base[0], b.Q.base[0])
    third = parse_config(serialize_config(again))
    assert again == third


def test_all_errors_reported_with_line_numbers():
    bad = """
[run]
mode = explore

[grid]
T = -1
backend = gpu

[coefficients]
n = 2
d = 1
A = 1 2 ; 3
Q = 1 0 ; 0 1
mystery = 5

[simulation]
n_paths = 0
"""
    with pytest.raises(ConfigError) as err:
        parse_config(bad)
    msgs = err.value.errors
    assert len(msgs) >= 7
    for needle in (
        "[run].mode",
        "[grid].N: required key missing",
        "[grid].T",
        "[grid].backend",
        "[coefficients].A: ragged rows",
        "[coefficients].mystery: unknown key",
        "[simulation].n_paths",
    ):
        assert any(needle in m for m in msgs), needle
    lines = [int(m[5:m.index(":")]) for m in msgs if m.startswith("line ")]
    assert lines == sorted(lines)


def test_duplicates_and_strays_rejected():
    with pytest.raises(ConfigError) as err:
        parse_config("n = 1\n[grid]\nN = 2\nN = 3\nT = 1\n[grid]\n" + MINIMAL.split("[grid]")[1].split("[coefficients]")[0] + "[coefficients]\nn = 1\nd = 1\nQ = 1\nR = 1\nQT = 1\n")
    text = "\n".join(err.value.errors)
    assert "outside any section" in text
    assert "duplicate key" in text
    assert "duplicate section" in text


def test_initial_condition_variants():
    cfg = parse_config(MINIMAL + "\n[run]\nmode = validate\n")
    # single-vector form becomes one atom with weight one
    single = parse_config(MINIMAL.replace("QT = 1.0", "QT = 1.0\nxi = 0.5"))
    xi, probs = initial_condition(single)
    assert xi.tolist() == [[0.5]] and probs.tolist() == [1.0]
    # atoms without weights default to uniform
    uniform = parse_config(
        MINIMAL.replace("QT = 1.0", "QT = 1.0\nxi_atoms = 0.5 ; -0.5")
    )
    xi, probs = initial_condition(uniform)
    assert probs.tolist() == [0.5, 0.5]
    with pytest.raises(ConfigError, match="not both"):
        parse_config(MINIMAL.replace("QT = 1.0", "QT = 1.0\nxi = 1\nxi_atoms = 1"))
    with pytest.raises(ConfigError, match="sum to"):
        parse_config(
            MINIMAL.replace("QT = 1.0", "QT = 1.0\nxi_atoms = 0.5 ; -0.5\nxi_probs = 0.7 0.6")
        )
    assert cfg.mode == "validate"


def test_tree_capacity_checked_at_parse_time():
    big = MINIMAL.replace("N = 2", "N = 12")
    with pytest.raises(ConfigError, match="at most 10"):
        parse_config(big)
    cfg = parse_config(big.replace("N = 12", "N = 12\nbackend = ode"))
    assert cfg.grid.n_steps == 12


def test_slope_keys_make_node_dependent_sets():
    text = MINIMAL.replace("Q = 1.0", "Q = 1.0\nA = -0.5\nA_slope = 0.1")
    c = build_coefficients(parse_config(text))
    assert not c.deterministic
    assert build_coefficients(parse_config(MINIMAL)).deterministic


def test_override_helper_validates():
    cfg = parse_config(MINIMAL)
    cfg = with_overrides(cfg, mode="oracle", seed=3, n_paths=10, out="x", backend="ode")
    assert (cfg.mode, cfg.simulation.seed, cfg.simulation.n_paths) == ("oracle", 3, 10)
    assert cfg.out == "x" and cfg.grid.backend == "ode"
    with pytest.raises(ConfigError):
        with_overrides(cfg, seed=-1)
    with pytest.raises(ConfigError):
        with_overrides(cfg, n_paths=0)


def test_report_csv_format():
    rows = (
        cli._info("answer", 1.0 / 3.0),
        cli._check("bad", 2.0, 1.0, False),
    )
    text = report_csv(rows)
    lines = text.splitlines()
    assert lines[0] == "metric,value,tolerance,pass"
    assert lines[1] == "answer,0.33333333333333331,inf,true"
    assert lines[2] == "bad,2,1,false"
    assert text.endswith("\n")


def test_residual_rows_must_be_finite():
    from cmvlq.errors import CmvlqError

    with pytest.raises(CmvlqError, match="finite"):
        cli._residual("x", math.nan, 1.0)
    with pytest.raises(CmvlqError, match="finite"):
        cli._residual("x", -1e-3, 1.0)


def _write(tmp_path, text):
    p = tmp_path / "run.cfg"
    p.write_text(text, encoding="utf-8")
    return str(p)


def test_validate_mode_passes_on_good_instance(tmp_path, capsys):
    path = _write(tmp_path, MINIMAL)
    status = main(["validate", "--config", path, "--out", str(tmp_path / "o")])
    assert status == 0
    report = (tmp_path / "o" / "validate_report.csv").read_text()
    assert report.splitlines()[0] == "metric,value,tolerance,pass"
    assert "coeff_delta_hat" in report
    assert capsys.readouterr().out.count("[PASS]") == 3


def test_validate_mode_fails_on_indefinite_mixed_weight(tmp_path):
    text = MINIMAL.replace("Q = 1.0", "Q = 0.0\nS = 1.0")
    status = main(["validate", "--config", _write(tmp_path, text),
                   "--out", str(tmp_path / "o")])
    assert status == 1
    report = (tmp_path / "o" / "validate_report.csv").read_text()
    assert "coeff_schur_min,-1,1e-10,false" in report


def test_compare_mode_reports_oracle_gaps_under_threshold(tmp_path):
    path = _write(tmp_path, FULL_2X1.format(out=str(tmp_path / "o")))
    status = main(["compare", "--config", path])
    assert status == 0
    rows = {}
    for line in (tmp_path / "o" / "compare_report.csv").read_text().splitlines()[1:]:
        name, value, tol, flag = line.split(",")
        rows[name] = (float(value), float(tol), flag)
    for name in ("oracle_cost_gap_rel", "oracle_control_gap"):
        value, tol, flag = rows[name]
        assert flag == "true" and value <= tol
    assert rows["picard_converged"][0] == 1.0
    assert rows["stationarity_residual"][0] <= 1e-10


def test_suite_reports_are_byte_identical_across_runs(tmp_path):
    base = FULL_2X1.format(out="ignored")
    path = _write(tmp_path, base)
    out1, out2 = str(tmp_path / "a"), str(tmp_path / "b")
    assert main(["suite", "--config", path, "--seed", "42", "--out", out1]) == 0
    assert main(["suite", "--config", path, "--seed", "42", "--out", out2]) == 0
    for name in ("suite_report.csv", "simulate_checkpoints.csv"):
        a = (tmp_path / "a" / name).read_bytes()
        b = (tmp_path / "b" / name).read_bytes()
        assert a == b
    header = (tmp_path / "a" / "simulate_checkpoints.csv").read_text().splitlines()[0]
    assert header == "time,group,component,dev_mean,dev_se"


def test_seed_override_changes_monte_carlo_rows(tmp_path):
    path = _write(tmp_path, FULL_2X1.format(out="ignored"))
    outs = []
    for seed, name in ((1, "s1"), (2, "s2")):
        out = str(tmp_path / name)
        assert main(["simulate", "--config", path, "--seed", str(seed),
                     "--paths", "48", "--out", out]) == 0
        text = (tmp_path / name / "simulate_report.csv").read_text()
        row = [l for l in text.splitlines() if l.startswith("mc_cost_mean,")][0]
        outs.append(row)
    assert outs[0] != outs[1]


def test_config_errors_exit_2_with_machine_readable_lines(tmp_path, capsys):
    path = _write(tmp_path, MINIMAL.replace("R = 1.0\n", ""))
    assert main(["solve", "--config", path]) == 2
    out = capsys.readouterr().out
    assert out.startswith("error,config,")
    assert "[coefficients].R" in out


def test_solver_errors_exit_2(tmp_path, capsys):
    # node-dependent coefficients have no continuous-time tables
    text = MINIMAL.replace("Q = 1.0", "Q = 1.0\nA = -0.5\nA_slope = 0.1")
    assert main(["simulate", "--config", _write(tmp_path, text)]) == 2
    assert "error,NotDeterministicError," in capsys.readouterr().out
    assert main(["oracle", "--config", _write(tmp_path, MINIMAL),
                 "--backend", "ode"]) == 2
    assert "requires the tree backend" in capsys.readouterr().out


def test_suite_skips_simulation_for_random_coefficients(tmp_path, capsys):
    text = MINIMAL.replace("Q = 1.0", "Q = 1.0\nA = -0.5\nA_slope = 0.1")
    out = str(tmp_path / "o")
    status = main(["suite", "--config", _write(tmp_path, text), "--out", out])
    assert status == 0
    stdout = capsys.readouterr().out
    assert "simulation skipped" in stdout
    report = (tmp_path / "o" / "suite_report.csv").read_text()
    assert "mc_cost_mean" not in report
    assert "oracle_cost_gap_rel" in report


def test_ode_backend_solve_reports_terminal_consistency(tmp_path):
    path = _write(tmp_path, FULL_2X1.format(out=str(tmp_path / "o")))
    assert main(["solve", "--config", path, "--backend", "ode"]) == 0
    report = (tmp_path / "o" / "solve_report.csv").read_text()
    for name in ("value_prediction", "pi_terminal_residual", "l_terminal_residual"):
        assert name in report


def test_run_result_carries_solve_report(tmp_path):
    cfg = parse_config(FULL_2X1.format(out=str(tmp_path / "o")))
    result = run(cfg)
    assert result.status in (0, 1)
    rep = result.report
    assert rep is not None
    assert rep.split_residual <= 1e-9
    assert rep.oracle_cost_gap is not None
    assert rep.picard_iterations is not None and rep.picard_iterations <= 200
    assert dict(rep.phase_seconds)  # wall clock stays out of the CSV
    report_text = (tmp_path / "o" / "compare_report.csv").read_text()
    assert "time" not in report_text.split("\n", 1)[0]
    assert isinstance(cfg, RunConfig)
