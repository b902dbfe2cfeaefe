"""Command line entry point: ``taylorflow run | oracle | compare``.

Exit codes: 0 on success, 2 on a configuration error, 3 on a numerical failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from .errors import ConfigError, TaylorFlowError
from .flows import FLOW_NAMES
from .integrator import LAMBDA_POINTS
from .runner import compare_flows, parse_flow, run_experiment
from .scenarios import EnergyReference, GridError, grid_posterior, resolve_scenario

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_NUMERICAL = 3

log = logging.getLogger("taylorflow")


def _grid_spec(text: str) -> tuple[tuple[float, ...], int]:
    parts = [p for p in text.split(",") if p.strip()]
    if len(parts) < 3 or len(parts) % 2 == 0:
        raise ConfigError("--grid expects lo0,hi0[,lo1,hi1...],res")
    try:
        bounds = tuple(float(p) for p in parts[:-1])
        res = int(parts[-1])
    except ValueError:
        raise ConfigError(f"bad --grid value {text!r}") from None
    return bounds, res


def _add_run_options(p: argparse.ArgumentParser) -> None:
    p.add_argument("--particles", type=int, help="ensemble size N")
    p.add_argument("--dlambda", type=float, help="pseudo-time step")
    p.add_argument("--no-diffusion", action="store_true", help="drift-only transport")
    p.add_argument("--seed", type=int, help="seed for prior sampling and flow noise")
    p.add_argument("--lambda-point", choices=sorted(LAMBDA_POINTS), default="end",
                   help="where within each step the field's pseudo-time is taken")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="taylorflow", description="Particle flow measurement updates.")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    run = sub.add_parser("run", help="transport an ensemble through one flow and write its report")
    run.add_argument("--scenario", required=True, help="JSON config path or builtin:range")
    run.add_argument("--flow", choices=FLOW_NAMES)
    run.add_argument("--order", type=int, help="expansion order for the DA flows")
    _add_run_options(run)
    run.add_argument("--record-trajectories", action="store_true")
    run.add_argument("--prior-from-ensemble", action="store_true",
                     help="use the drawn ensemble's mean and covariance as the prior")
    run.add_argument("--no-plot", action="store_true", help="skip the SVG")
    run.add_argument("--out", default="out", help="output directory")

    oracle = sub.add_parser("oracle", help="grid posterior moments")
    oracle.add_argument("--scenario", required=True)
    oracle.add_argument("--grid", help="lo0,hi0,lo1,hi1,res (defaults to the scenario's grid)")
    oracle.add_argument("--out", help="directory for oracle.json")

    cmp_ = sub.add_parser("compare", help="energy distance of several flows to the grid posterior")
    cmp_.add_argument("--scenario", required=True)
    cmp_.add_argument("--flows", required=True, help="comma list, e.g. gromov,dapff-v2:3,dapff-v1:8")
    cmp_.add_argument("--metric", choices=["energy"], default="energy")
    cmp_.add_argument("--grid", help="lo0,hi0,lo1,hi1,res")
    _add_run_options(cmp_)
    cmp_.add_argument("--out", help="directory for compare.json")
    return parser


def _config(scenario, args, record: bool = False):
    overrides = {"record_trajectories": record, "lambda_point": args.lambda_point}
    if args.dlambda is not None:
        overrides["dlambda"] = args.dlambda
    if args.seed is not None:
        overrides["seed"] = args.seed
    if args.no_diffusion:
        overrides["diffusion"] = False
    return scenario.flow_config(**overrides)


def _grid(scenario, args):
    if args.grid:
        bounds, res = _grid_spec(args.grid)
        return grid_posterior(scenario, bounds, res)
    return grid_posterior(scenario)


def _emit(payload: dict, out_dir, name: str) -> None:
    text = json.dumps(payload, indent=2, sort_keys=True) + "\n"
    if out_dir:
        path = Path(out_dir)
        path.mkdir(parents=True, exist_ok=True)
        (path / name).write_text(text)
    sys.stdout.write(text)


def cmd_run(args) -> int:
    scenario = resolve_scenario(args.scenario)
    if args.flow is None:
        kind = scenario.flow_kind if args.order is None else parse_flow(scenario.flow, args.order)
    else:
        order = args.order if args.order is not None else (scenario.order if args.flow == scenario.flow else None)
        kind = parse_flow(args.flow, order)
    cfg = _config(scenario, args, record=args.record_trajectories)
    report = run_experiment(
        scenario, kind, cfg, args.out,
        n_particles=args.particles,
        prior_from_ensemble=args.prior_from_ensemble,
        plot=not args.no_plot,
    )
    log.info("wrote %s", ", ".join(str(f) for f in report.files))
    final = report.summary["final"]
    print(f"{report.summary['flow']}: N={final['N']} mean |h(x)-y| "
          f"{report.summary['initial']['mean_abs_residual']:.4g} -> {final['mean_abs_residual']:.4g} "
          f"in {report.wall_time:.2f}s; wrote {args.out}")
    diag = report.summary["diagnostics"]
    if diag["frozen_particle_steps"] or diag["indefinite_diffusion"]:
        print(f"diagnostics: {diag}")
    return EXIT_OK


def cmd_oracle(args) -> int:
    scenario = resolve_scenario(args.scenario)
    grid = _grid(scenario, args)
    payload = {
        "scenario": scenario.name,
        "mean": grid.mean.tolist(),
        "cov": grid.cov.tolist(),
        "cells": int(grid.density.size),
        "mass": grid.total_mass,
    }
    _emit(payload, args.out, "oracle.json")
    return EXIT_OK


def cmd_compare(args) -> int:
    scenario = resolve_scenario(args.scenario)
    kinds = [parse_flow(spec) for spec in args.flows.split(",") if spec.strip()]
    if not kinds:
        raise ConfigError("--flows is empty")
    cfg = _config(scenario, args)
    reference = EnergyReference.from_grid(_grid(scenario, args))
    rows = compare_flows(scenario, kinds, cfg, n_particles=args.particles, reference=reference)
    payload = {"scenario": scenario.name, "metric": args.metric, "seed": cfg.seed,
               "diffusion": cfg.diffusion, "results": rows}
    _emit(payload, args.out, "compare.json")
    return EXIT_OK


COMMANDS = {"run": cmd_run, "oracle": cmd_oracle, "compare": cmd_compare}


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return COMMANDS[args.command](args)
    except (ConfigError, GridError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (TaylorFlowError, ArithmeticError, ValueError) as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL


if __name__ == "__main__":
    sys.exit(main())
