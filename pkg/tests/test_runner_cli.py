import json

import numpy as np
import pytest

from taylorflow import cli
from taylorflow.ensemble import ParticleEnsemble
from taylorflow.errors import ConfigError, NumericalFailure
from taylorflow.flows import FlowKind
from taylorflow.integrator import FlowConfig
from taylorflow.runner import compare_flows, mean_abs_residual, parse_flow, plot_limits, run_experiment, run_flow

SMALL = ["--particles", "20", "--dlambda", "0.1"]


def read_all(path):
    return {p.name: p.read_bytes() for p in sorted(path.iterdir())}


def test_parse_flow():
    assert parse_flow("gromov") == FlowKind("gromov")
    assert parse_flow("dapff-v1:8") == FlowKind("dapff-v1", 8)
    assert parse_flow("dapff-v2-3") == FlowKind("dapff-v2", 3)
    assert parse_flow("dapff-v1", 4) == FlowKind("dapff-v1", 4)
    assert parse_flow("exact", 5).order is None
    with pytest.raises(ConfigError):
        parse_flow("dapff-v1:x")
    with pytest.raises(ConfigError):
        parse_flow("dapff-v2:4")


def test_mean_abs_residual(range_scenario):
    assert mean_abs_residual(range_scenario, [[3.0, 4.0], [0.0, 1.0]]) == pytest.approx(2.0)


def test_run_experiment_files(tmp_path, range_scenario):
    cfg = FlowConfig(dlambda=0.1, diffusion=False, record_trajectories=True)
    report = run_experiment(range_scenario, FlowKind("gromov"), cfg, tmp_path, n_particles=15)
    names = sorted(p.name for p in tmp_path.iterdir())
    assert names == ["final.csv", "initial.csv", "plot.svg", "summary.json", "trajectory.jsonl"]
    summary = json.loads((tmp_path / "summary.json").read_text())
    assert summary == json.loads(json.dumps(report.summary))
    assert summary["flow"] == "Gromov"
    assert summary["config"]["N"] == 15
    assert "wall_time" not in json.dumps(summary)
    assert summary["final"]["mean_abs_residual"] < summary["initial"]["mean_abs_residual"]
    final = ParticleEnsemble.from_csv((tmp_path / "final.csv").read_text())
    assert final.states.tobytes() == report.final.states.tobytes()
    assert len((tmp_path / "trajectory.jsonl").read_text().splitlines()) == 11
    assert report.wall_time > 0


def test_run_without_output_dir_writes_nothing(tmp_path, range_scenario, monkeypatch):
    monkeypatch.chdir(tmp_path)
    report = run_experiment(range_scenario, FlowKind("gromov"), FlowConfig(dlambda=0.5), n_particles=3)
    assert report.files == []
    assert list(tmp_path.iterdir()) == []


def test_single_particle_summary(range_scenario):
    report = run_experiment(range_scenario, FlowKind("exact"), FlowConfig(dlambda=0.5), n_particles=1)
    assert "cov" not in report.summary["final"]
    assert len(report.summary["final"]["mean"]) == 2


def test_prior_from_ensemble(range_scenario):
    cfg = FlowConfig(dlambda=0.25, diffusion=False)
    initial, _, _, prior = run_flow(range_scenario, FlowKind("gromov"), cfg, 50, prior_from_ensemble=True)
    np.testing.assert_allclose(prior.mean, initial.states.mean(axis=0))
    np.testing.assert_allclose(prior.cov, np.cov(initial.states.T))
    with pytest.raises(ConfigError):
        run_flow(range_scenario, FlowKind("gromov"), cfg, 2, prior_from_ensemble=True)


def test_plot_limits_cover_prior_and_grid(range_scenario):
    lo, hi = plot_limits(range_scenario)
    assert lo[0] <= -6.5 and hi[0] >= 1.0
    assert lo[1] <= -3.0 and hi[1] >= 3.0


def test_compare_flows_rows(range_scenario):
    from taylorflow.scenarios import EnergyReference

    ref = EnergyReference(np.random.default_rng(0).normal(size=(500, 2)) * 0.2 + [-0.8, 0.4])
    rows = compare_flows(
        range_scenario, [FlowKind("gromov"), FlowKind("exact")], FlowConfig(dlambda=0.1), n_particles=20, reference=ref
    )
    assert [r["flow"] for r in rows] == ["Gromov", "exact"]
    assert all(np.isfinite(r["energy_distance"]) for r in rows)


def test_cli_run_is_byte_identical(tmp_path, capsys):
    args = ["run", "--scenario", "builtin:range", "--flow", "gromov", *SMALL, "--seed", "4", "--record-trajectories"]
    assert cli.main(args + ["--out", str(tmp_path / "a")]) == 0
    assert cli.main(args + ["--out", str(tmp_path / "b")]) == 0
    a, b = read_all(tmp_path / "a"), read_all(tmp_path / "b")
    assert set(a) == {"initial.csv", "final.csv", "summary.json", "trajectory.jsonl", "plot.svg"}
    assert a == b
    assert "Gromov" in capsys.readouterr().out


def test_cli_seed_changes_output(tmp_path):
    base = ["run", "--scenario", "builtin:range", "--flow", "gromov", *SMALL, "--no-plot"]
    cli.main(base + ["--seed", "1", "--out", str(tmp_path / "a")])
    cli.main(base + ["--seed", "2", "--out", str(tmp_path / "b")])
    assert (tmp_path / "a" / "final.csv").read_bytes() != (tmp_path / "b" / "final.csv").read_bytes()


def test_cli_order_and_lambda_point(tmp_path):
    out = tmp_path / "o"
    args = ["run", "--scenario", "builtin:range", "--flow", "dapff-v2", "--order", "2", *SMALL,
            "--no-diffusion", "--lambda-point", "mid", "--no-plot", "--out", str(out)]
    assert cli.main(args) == 0
    summary = json.loads((out / "summary.json").read_text())
    assert summary["flow"] == "DAPFFv2-2"
    assert summary["config"]["lambda_point"] == "mid"
    assert summary["config"]["diffusion"] is False


def test_cli_default_flow_from_scenario(tmp_path):
    out = tmp_path / "d"
    assert cli.main(["run", "--scenario", "builtin:range", *SMALL, "--order", "4", "--no-plot", "--out", str(out)]) == 0
    assert json.loads((out / "summary.json").read_text())["flow"] == "DAPFFv1-4"


def test_cli_prior_from_ensemble(tmp_path):
    out = tmp_path / "p"
    args = ["run", "--scenario", "builtin:range", "--flow", "gromov", *SMALL, "--prior-from-ensemble",
            "--no-plot", "--out", str(out)]
    assert cli.main(args) == 0
    summary = json.loads((out / "summary.json").read_text())
    assert summary["config"]["prior_from_ensemble"] is True
    assert summary["prior"]["mean"] != [-3.5, 0.0]


def test_cli_config_errors(tmp_path, capsys):
    assert cli.main(["run", "--scenario", str(tmp_path / "missing.json")]) == cli.EXIT_CONFIG
    assert cli.main(["run", "--scenario", "builtin:range", "--flow", "dapff-v2", "--order", "7"]) == cli.EXIT_CONFIG
    assert cli.main(["run", "--scenario", "builtin:range", "--dlambda", "0"]) == cli.EXIT_CONFIG
    assert cli.main(["oracle", "--scenario", "builtin:range", "--grid=-1,1,-1,1,50"]) == cli.EXIT_CONFIG
    assert cli.main(["oracle", "--scenario", "builtin:range", "--grid", "1,2"]) == cli.EXIT_CONFIG
    assert "config error" in capsys.readouterr().err


def test_cli_numerical_failure_from_origin_expansion(tmp_path, range_scenario, capsys):
    path = tmp_path / "origin.json"
    range_scenario.replace(prior_mean=(0.0, 0.0)).save(path)
    code = cli.main(["run", "--scenario", str(path), "--flow", "dapff-v1", "--order", "4", "--out", str(tmp_path / "x")])
    assert code == cli.EXIT_NUMERICAL
    assert "numerical failure" in capsys.readouterr().err


def test_cli_numerical_failure_from_integrator(tmp_path, monkeypatch):
    def boom(*args, **kwargs):
        raise NumericalFailure("particle 0 became non-finite", particle=0, lam=0.5)

    monkeypatch.setattr(cli, "run_experiment", boom)
    assert cli.main(["run", "--scenario", "builtin:range", "--out", str(tmp_path)]) == cli.EXIT_NUMERICAL


def test_cli_oracle(tmp_path, capsys):
    assert cli.main(["oracle", "--scenario", "builtin:range", "--grid=-4,1,-3,3,300", "--out", str(tmp_path)]) == 0
    printed = json.loads(capsys.readouterr().out)
    saved = json.loads((tmp_path / "oracle.json").read_text())
    assert printed == saved
    assert saved["cells"] == 90_000
    assert saved["mean"][0] == pytest.approx(-0.849, abs=0.01)


def test_cli_compare(tmp_path, capsys):
    args = ["compare", "--scenario", "builtin:range", "--flows", "gromov,dapff-v1:4", "--metric", "energy",
            "--particles", "20", "--dlambda", "0.1", "--grid=-4,1,-3,3,300", "--out", str(tmp_path)]
    assert cli.main(args) == 0
    payload = json.loads(capsys.readouterr().out)
    assert [r["flow"] for r in payload["results"]] == ["Gromov", "DAPFFv1-4"]
    first = (tmp_path / "compare.json").read_bytes()
    cli.main(args)
    assert (tmp_path / "compare.json").read_bytes() == first


def test_cli_single_particle_zero_drift_is_identity(tmp_path):
    # a measurement that cannot move anything: the state has no influence on h
    from taylorflow.scenarios import Scenario

    scen = Scenario(
        prior_mean=(0.5, -0.5), prior_cov=((1.0, 0.0), (0.0, 1.0)), model_type="affine",
        model_params={"H": [[0.0, 0.0]], "b": [0.3]}, R=((1.0,),), y_obs=(0.3,), flow="gromov", order=None,
        n_particles=1,
    )
    path = tmp_path / "flat.json"
    scen.save(path)
    out = tmp_path / "r"
    assert cli.main(["run", "--scenario", str(path), "--no-diffusion", "--no-plot", "--out", str(out)]) == 0
    assert (out / "initial.csv").read_text().splitlines()[1:] == (out / "final.csv").read_text().splitlines()[1:]


def test_csv_uses_seventeen_significant_digits(tmp_path):
    out = tmp_path / "c"
    cli.main(["run", "--scenario", "builtin:range", "--flow", "gromov", *SMALL, "--no-plot", "--out", str(out)])
    lines = (out / "final.csv").read_text().splitlines()
    assert lines[0] == "x0,x1"
    first = lines[1].split(",")[0]
    assert len(first.lstrip("-").replace(".", "").split("e")[0].lstrip("0")) <= 17
    assert float(first) == ParticleEnsemble.from_csv((out / "final.csv").read_text()).states[0, 0]
