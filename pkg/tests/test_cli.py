"""Command-line front door: config plumbing, exit codes, output files."""

import json
import math
import subprocess
import sys

import numpy as np
import pytest

from gsip import cli
from gsip.core import ContractViolationError, DecisionPoint, Scenario, ScenarioSet
from gsip.quadrotor import QuadParams
from gsip.reduction import (
    STATUS_CONVERGED,
    STATUS_ITERATION_LIMIT,
    STATUS_MASTER_INFEASIBLE,
    SolveReport,
)


def _fake_report(status):
    u = np.linspace(0.5, 1.5, 20)
    scen = ScenarioSet().add(Scenario(np.zeros(40), 1, 0.5), 1e-8)
    decision = None
    if status != STATUS_MASTER_INFEASIBLE:
        decision = DecisionPoint(u, 12.5)
    return SolveReport(
        decision=decision,
        scenarios=scen,
        iterations=3,
        sigma_history=(0.5, 0.01, -math.inf),
        gamma_history=(10.0, 12.0, 12.5),
        status=status,
        wall_time=1.25,
        iter_wall_times=(0.5, 0.4, 0.35),
    )


def _patch_solver(monkeypatch, status):
    report = _fake_report(status)
    monkeypatch.setattr(cli, "_solve_variant",
                        lambda config: (QuadParams(), report))
    return report


def test_config_file_roundtrip(tmp_path):
    path = tmp_path / "config.json"
    path.write_text(json.dumps({"variant": "sip2", "seed": 99, "epsilon": 0.01}))
    config = cli.load_config(str(path), {})
    assert config.variant == "sip2"
    assert config.seed == 99
    assert config.epsilon == 0.01
    assert config.mc_samples == 10000  # untouched default


def test_flag_overrides_beat_config_file(tmp_path):
    path = tmp_path / "config.json"
    path.write_text(json.dumps({"seed": 5, "variant": "rsip"}))
    config = cli.load_config(str(path), {"seed": 9, "variant": None})
    assert config.seed == 9
    assert config.variant == "rsip"  # None override leaves the file value


def test_config_unknown_key_rejected(tmp_path):
    path = tmp_path / "config.json"
    path.write_text(json.dumps({"sed": 5}))
    with pytest.raises(ContractViolationError, match="unknown keys"):
        cli.load_config(str(path), {})


def test_config_bad_json_rejected(tmp_path):
    path = tmp_path / "config.json"
    path.write_text("{not json")
    with pytest.raises(ContractViolationError, match="cannot read config"):
        cli.load_config(str(path), {})


def test_runconfig_validation():
    with pytest.raises(ContractViolationError):
        cli.RunConfig(variant="hexacopter")
    with pytest.raises(ContractViolationError):
        cli.RunConfig(negation_mode="majority_vote")
    with pytest.raises(ContractViolationError):
        cli.RunConfig(mc_samples=0)
    with pytest.raises(ContractViolationError):
        cli.RunConfig(seed=-1)


def test_help_exits_zero(capsys):
    assert cli.main(["--help"]) == cli.EXIT_OK
    capsys.readouterr()


def test_missing_command_is_config_error(capsys):
    assert cli.main([]) == cli.EXIT_CONFIG
    capsys.readouterr()


def test_unknown_variant_flag_is_config_error(capsys):
    assert cli.main(["solve", "--variant", "nope"]) == cli.EXIT_CONFIG
    capsys.readouterr()


def test_solve_converged_writes_all_outputs(tmp_path, monkeypatch, capsys):
    _patch_solver(monkeypatch, STATUS_CONVERGED)
    out = tmp_path / "run"
    code = cli.main(["solve", "--variant", "esip", "--out", str(out)])
    capsys.readouterr()
    assert code == cli.EXIT_OK

    report = json.loads((out / "report.json").read_text())
    assert report["schema_version"] == 1
    assert report["status"] == STATUS_CONVERGED
    assert report["gamma"] == 12.5
    assert report["gamma_history"] == [10.0, 12.0, 12.5]
    # non-finite separation values serialize as null
    assert report["sigma_history"][-1] is None
    assert report["config"]["variant"] == "esip"
    assert len(report["iteration_log"]) == 3
    assert report["iteration_log"][0]["gamma"] == 10.0

    scenarios_doc = json.loads((out / "scenarios.json").read_text())
    assert len(scenarios_doc["scenarios"]) == 1
    assert len(scenarios_doc["scenarios"][0]["w"]) == 40

    policy = json.loads((out / "policy.json").read_text())
    assert policy["gamma"] == 12.5
    assert len(policy["thrusts"]) == 20
    assert (out / "convergence.png").stat().st_size > 0


def test_solve_master_infeasible_exit_and_no_policy(tmp_path, monkeypatch, capsys):
    _patch_solver(monkeypatch, STATUS_MASTER_INFEASIBLE)
    out = tmp_path / "run"
    code = cli.main(["solve", "--variant", "sip1", "--out", str(out)])
    capsys.readouterr()
    assert code == cli.EXIT_MASTER_INFEASIBLE
    assert (out / "report.json").exists()
    assert not (out / "policy.json").exists()


def test_solve_iteration_limit_exit(tmp_path, monkeypatch, capsys):
    _patch_solver(monkeypatch, STATUS_ITERATION_LIMIT)
    code = cli.main(["solve", "--variant", "esip", "--out", str(tmp_path / "r")])
    capsys.readouterr()
    assert code == cli.EXIT_ITERATION_LIMIT


def test_solve_report_bytes_deterministic(tmp_path, monkeypatch, capsys):
    # same invocation twice; wall times are frozen in the fake, so the
    # rewritten files must match byte for byte
    _patch_solver(monkeypatch, STATUS_CONVERGED)
    out = tmp_path / "run"
    args = ["solve", "--variant", "esip", "--out", str(out), "--seed", "7"]
    cli.main(args)
    first = {name: (out / name).read_bytes()
             for name in ("report.json", "scenarios.json", "policy.json")}
    cli.main(args)
    capsys.readouterr()
    for name, blob in first.items():
        assert (out / name).read_bytes() == blob


def _hover_policy(tmp_path):
    p = QuadParams()
    hover = 0.5 * (p.mass * p.gravity)
    path = tmp_path / "policy.json"
    path.write_text(json.dumps({
        "variant": "esip",
        "gamma": 50.5,
        "thrusts": [hover] * (2 * p.n_steps),
    }))
    return path


def test_evaluate_outputs(tmp_path, capsys):
    policy = _hover_policy(tmp_path)
    out = tmp_path / "eval"
    code = cli.main(["evaluate", str(policy), "--out", str(out),
                     "--samples", "40", "--seed", "3"])
    capsys.readouterr()
    assert code == cli.EXIT_OK

    mc = json.loads((out / "mc_report.json").read_text())
    assert mc["schema_version"] == 1
    assert mc["samples"] == 40
    assert 0 <= mc["violation_count"] <= 40
    assert mc["worst_cost"] >= mc["avg_cost"]
    assert mc["seed"] == 3

    lines = (out / "trajectories.csv").read_text().splitlines()
    assert lines[0] == "sample_id,k,x1,x2,x3,x4,x5,x6"
    assert len(lines) == 1 + 40 * (QuadParams().n_steps + 1)
    assert (out / "trajectories.png").stat().st_size > 0


def test_evaluate_truncates_trajectory_export(tmp_path, capsys):
    policy = _hover_policy(tmp_path)
    out = tmp_path / "eval"
    code = cli.main(["evaluate", str(policy), "--out", str(out),
                     "--samples", "230", "--seed", "3"])
    capsys.readouterr()
    assert code == cli.EXIT_OK
    mc = json.loads((out / "mc_report.json").read_text())
    assert mc["samples"] == 230
    lines = (out / "trajectories.csv").read_text().splitlines()
    assert len(lines) == 1 + 200 * (QuadParams().n_steps + 1)


def test_evaluate_bad_policy_is_config_error(tmp_path, capsys):
    path = tmp_path / "policy.json"
    path.write_text(json.dumps({"variant": "esip", "gamma": 1.0}))
    assert cli.main(["evaluate", str(path), "--out", str(tmp_path / "o")]) \
        == cli.EXIT_CONFIG
    assert cli.main(["evaluate", str(tmp_path / "missing.json"),
                     "--out", str(tmp_path / "o")]) == cli.EXIT_CONFIG
    capsys.readouterr()


def test_toy_end_to_end(tmp_path, capsys):
    out = tmp_path / "toy"
    code = cli.main(["toy", "--out", str(out), "--seed", "3"])
    capsys.readouterr()
    assert code == cli.EXIT_OK
    report = json.loads((out / "report.json").read_text())
    assert report["passed"] is True
    assert abs(report["u_star"] - 0.5) <= 1e-3


def test_toy_paper_max_divergence_is_flagged(tmp_path, capsys):
    # the max-aggregated negation cannot refute the scalar instance, so the
    # run ends without the optimum and says so
    out = tmp_path / "pm"
    code = cli.main(["toy", "--mode", "paper_max", "--out", str(out),
                     "--seed", "3"])
    capsys.readouterr()
    assert code == cli.EXIT_TOY_MISMATCH
    report = json.loads((out / "report.json").read_text())
    assert report["passed"] is False
    assert report["status"] == "MasterInfeasible"
    assert "refute" in report["note"]


def test_toy_reports_match_apart_from_wall_time(tmp_path, capsys):
    out = tmp_path / "toy"
    assert cli.main(["toy", "--out", str(out), "--seed", "11"]) == cli.EXIT_OK
    first = json.loads((out / "report.json").read_text())
    assert cli.main(["toy", "--out", str(out), "--seed", "11"]) == cli.EXIT_OK
    capsys.readouterr()
    second = json.loads((out / "report.json").read_text())
    first.pop("wall_time")
    second.pop("wall_time")
    assert first == second


def test_installed_entry_point_responds():
    proc = subprocess.run([sys.executable, "-m", "gsip.cli", "--help"],
                          capture_output=True, text=True)
    assert proc.returncode == 0
    assert "solve" in proc.stdout and "evaluate" in proc.stdout
