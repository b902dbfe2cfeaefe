"""Run flows on a scenario and write their reports.

Every file except the SVG is a deterministic function of the scenario, flow
and config, so identical invocations produce identical bytes.  Wall time is
returned in :class:`RunReport` but kept out of the files for that reason.
"""

from __future__ import annotations

import json
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .ensemble import ParticleEnsemble, ensemble_stats, sample_prior
from .errors import ConfigError
from .flows import FLOW_NAMES, FlowKind
from .integrator import FlowConfig, FlowTrajectory, flow_update
from .models import GaussianPrior
from .scenarios import EnergyReference, GridError, GridPosterior, Scenario, grid_posterior


@dataclass
class RunReport:
    summary: dict
    initial: ParticleEnsemble
    final: ParticleEnsemble
    trajectory: FlowTrajectory
    wall_time: float = 0.0
    files: list = field(default_factory=list)


def parse_flow(spec: str, default_order: int | None = None) -> FlowKind:
    """``"gromov"``, ``"dapff-v1:8"`` or ``"dapff-v2-3"`` to a :class:`FlowKind`."""
    spec = spec.strip()
    name, order = spec, default_order
    if ":" in spec:
        name, text = spec.split(":", 1)
        order = _parse_order(text, spec)
    elif spec not in FLOW_NAMES and spec.rsplit("-", 1)[0] in FLOW_NAMES:
        name, text = spec.rsplit("-", 1)
        order = _parse_order(text, spec)
    if name not in ("dapff-v1", "dapff-v2"):
        order = None
    return FlowKind(name, order)


def _parse_order(text: str, spec: str) -> int:
    try:
        return int(text)
    except ValueError:
        raise ConfigError(f"bad expansion order in flow spec {spec!r}") from None


def mean_abs_residual(scenario: Scenario, states) -> float:
    """Mean of ``|h(x) - y_obs|`` over particles and measurement components."""
    return float(np.mean(np.abs(scenario.model.evaluate(np.asarray(states)) - scenario.model.y_obs)))


def ensemble_summary(scenario: Scenario, ens: ParticleEnsemble) -> dict:
    out = {"N": len(ens), "mean_abs_residual": mean_abs_residual(scenario, ens.states)}
    if len(ens) >= 2:
        mean, cov = ensemble_stats(ens)
        out["mean"] = mean.tolist()
        out["cov"] = cov.tolist()
    else:
        out["mean"] = ens.states[0].tolist()
    return out


def _grid_or_none(scenario: Scenario, grid: GridPosterior | None) -> GridPosterior | None:
    if grid is not None:
        return grid
    if scenario.grid_bounds is None:
        return None
    try:
        return grid_posterior(scenario)
    except GridError:
        return None


def run_flow(
    scenario: Scenario,
    kind: FlowKind,
    cfg: FlowConfig,
    n_particles: int | None = None,
    prior_from_ensemble: bool = False,
) -> tuple[ParticleEnsemble, ParticleEnsemble, FlowTrajectory, GaussianPrior]:
    """Sample the scenario prior and transport the ensemble with ``kind``.

    With ``prior_from_ensemble`` the flow uses the sample mean and covariance
    of the drawn ensemble in place of the scenario's prior.
    """
    count = scenario.n_particles if n_particles is None else n_particles
    initial = sample_prior(scenario.prior, count, cfg.seed)
    prior = scenario.prior
    if prior_from_ensemble:
        if count <= prior.dim:
            raise ConfigError("estimating the prior from the ensemble needs more particles than state dimensions")
        mean, cov = ensemble_stats(initial)
        prior = GaussianPrior(mean, cov)
    final, traj = flow_update(initial, kind, prior, scenario.model, cfg)
    return initial, final, traj, prior


def run_experiment(
    scenario: Scenario,
    kind: FlowKind | None = None,
    cfg: FlowConfig | None = None,
    out_dir=None,
    *,
    n_particles: int | None = None,
    prior_from_ensemble: bool = False,
    grid: GridPosterior | None = None,
    plot: bool = True,
) -> RunReport:
    """Run one flow and write ``initial.csv``, ``final.csv``, ``summary.json``,
    ``trajectory.jsonl`` (when recording) and ``plot.svg`` into ``out_dir``."""
    kind = scenario.flow_kind if kind is None else kind
    cfg = scenario.flow_config() if cfg is None else cfg
    start = time.perf_counter()
    initial, final, traj, prior = run_flow(scenario, kind, cfg, n_particles, prior_from_ensemble)
    wall = time.perf_counter() - start

    summary = {
        "scenario": scenario.name,
        "flow": kind.label,
        "config": {
            "flow": kind.name,
            "order": kind.order,
            "N": len(initial),
            "dlambda": cfg.dlambda,
            "diffusion": cfg.diffusion,
            "seed": cfg.seed,
            "lambda_point": cfg.lambda_point,
            "prior_from_ensemble": prior_from_ensemble,
        },
        "prior": {"mean": prior.mean.tolist(), "cov": prior.cov.tolist()},
        "initial": ensemble_summary(scenario, initial),
        "final": ensemble_summary(scenario, final),
        "diagnostics": traj.diagnostics,
    }
    report = RunReport(summary, initial, final, traj, wall)
    if out_dir is None:
        return report

    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    files = {
        "initial.csv": initial.to_csv(),
        "final.csv": final.to_csv(),
        "summary.json": json.dumps(summary, indent=2, sort_keys=True) + "\n",
    }
    if cfg.record_trajectories:
        files["trajectory.jsonl"] = traj.to_jsonl()
    for name, text in files.items():
        (out / name).write_text(text)
        report.files.append(out / name)
    if plot and initial.dim == 2:
        path = out / "plot.svg"
        plot_run(scenario, report, path, _grid_or_none(scenario, grid))
        report.files.append(path)
    return report


def compare_flows(
    scenario: Scenario,
    kinds: list[FlowKind],
    cfg: FlowConfig | None = None,
    *,
    n_particles: int | None = None,
    grid: GridPosterior | None = None,
    reference: EnergyReference | None = None,
) -> list[dict]:
    """Energy distance to the grid posterior for each flow, all from one initial draw."""
    cfg = scenario.flow_config() if cfg is None else cfg
    if reference is None:
        reference = EnergyReference.from_grid(grid if grid is not None else grid_posterior(scenario))
    rows = []
    for kind in kinds:
        _, final, traj, _ = run_flow(scenario, kind, cfg, n_particles)
        rows.append({
            "flow": kind.label,
            "energy_distance": reference.distance(final.states),
            "mean_abs_residual": mean_abs_residual(scenario, final.states),
            "frozen_particle_steps": traj.diagnostics["frozen_particle_steps"],
        })
    return rows


def plot_limits(scenario: Scenario) -> tuple[np.ndarray, np.ndarray]:
    """Axes shared by every flow on a scenario: prior +-3 sigma joined with the oracle grid."""
    sd = np.sqrt(np.diag(scenario.prior.cov))
    lo, hi = scenario.prior.mean - 3 * sd, scenario.prior.mean + 3 * sd
    if scenario.grid_bounds is not None:
        bounds = np.reshape(scenario.grid_bounds, (-1, 2))
        lo, hi = np.minimum(lo, bounds[:, 0]), np.maximum(hi, bounds[:, 1])
    return lo, hi


def plot_run(scenario: Scenario, report: RunReport, path, grid: GridPosterior | None = None) -> None:
    """Scatter of initial and final particles over the posterior contour."""
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    with matplotlib.rc_context({"svg.hashsalt": "taylorflow", "svg.fonttype": "path"}):
        fig, ax = plt.subplots(figsize=(6, 5))
        if grid is not None and grid.dim == 2:
            ax.contour(grid.axes[0], grid.axes[1], grid.density.T, levels=8, colors="0.6", linewidths=0.8)
        snaps = report.trajectory.snapshots
        if snaps and not report.summary["config"]["diffusion"]:
            paths = np.stack(snaps)
            for i in range(paths.shape[1]):
                ax.plot(paths[:, i, 0], paths[:, i, 1], color="0.75", lw=0.4, ls="--")
        ax.scatter(*report.initial.states.T, s=6, color="tab:blue", label="initial")
        ax.scatter(*report.final.states.T, s=6, color="black", label="final")
        lo, hi = plot_limits(scenario)
        ax.set_xlim(lo[0], hi[0])
        ax.set_ylim(lo[1], hi[1])
        ax.set_xlabel("x0")
        ax.set_ylabel("x1")
        ax.set_title(f"{report.summary['flow']} on {scenario.name}")
        ax.legend(loc="upper right")
        ax.set_aspect("equal", adjustable="box")
        fig.savefig(path, format="svg", metadata={"Date": None})
        plt.close(fig)
