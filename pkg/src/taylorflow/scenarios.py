"""Experiment scenarios and the reference oracles used to judge the flows.

A :class:`Scenario` bundles a Gaussian prior, a registered measurement model
and default run settings, and round-trips through a JSON config of the form::

    {"prior": {"mean": [...], "cov": [[...]]},
     "model": {"type": "range", "params": {}, "R": [[...]], "y_obs": [...]},
     "run": {"flow": "dapff-v1", "order": 8, "N": 200, "dlambda": 0.02,
             "diffusion": true, "seed": 0},
     "grid": {"bounds": [x0, x1, y0, y1], "resolution": 600}}

The ``grid`` section is optional and fixes the oracle grid and plot axes.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from functools import cached_property
from pathlib import Path

import numpy as np
from scipy.spatial.distance import cdist

from .errors import ConfigError
from .flows import FlowKind
from .integrator import FlowConfig
from .models import GaussianPrior, MeasurementModel

BOUNDARY_MASS_TOL = 1e-4
COARSENESS_TOL = 1e-3
ENERGY_SAMPLES = 10_000


@dataclass(frozen=True, eq=False)
class Scenario:
    """Prior, measurement model and default run settings for one update."""

    prior_mean: tuple
    prior_cov: tuple
    model_type: str
    R: tuple
    y_obs: tuple
    model_params: dict = field(default_factory=dict)
    flow: str = "dapff-v1"
    order: int | None = 8
    n_particles: int = 200
    dlambda: float = 1.0 / 50.0
    diffusion: bool = True
    seed: int = 0
    grid_bounds: tuple | None = None
    grid_resolution: int = 400
    name: str = "custom"

    def __post_init__(self):
        for attr in ("prior_mean", "prior_cov", "R", "y_obs"):
            object.__setattr__(self, attr, _freeze(getattr(self, attr)))
        if self.grid_bounds is not None:
            object.__setattr__(self, "grid_bounds", tuple(float(b) for b in self.grid_bounds))
        try:
            self.prior, self.model, self.flow_kind
        except ValueError as exc:
            if isinstance(exc, ConfigError):
                raise
            raise ConfigError(str(exc)) from None
        if self.n_particles < 1:
            raise ConfigError("N must be at least 1")
        self.flow_config()

    @cached_property
    def prior(self) -> GaussianPrior:
        return GaussianPrior(np.array(self.prior_mean), np.array(self.prior_cov))

    @cached_property
    def model(self) -> MeasurementModel:
        model = MeasurementModel.from_registry(self.model_type, np.array(self.R), np.array(self.y_obs), self.model_params)
        if model.evaluate(self.prior.mean).shape != (model.dim,):
            raise ConfigError("measurement model output does not match y_obs")
        return model

    @property
    def flow_kind(self) -> FlowKind:
        return FlowKind(self.flow, self.order)

    def flow_config(self, **overrides) -> FlowConfig:
        opts = {"dlambda": self.dlambda, "diffusion": self.diffusion, "seed": self.seed}
        opts.update(overrides)
        return FlowConfig(**opts)

    def replace(self, **changes) -> Scenario:
        data = self.to_dict()
        fields = {**_fields_from_dict(data), **changes}
        return Scenario(**fields)

    def to_dict(self) -> dict:
        data = {
            "name": self.name,
            "prior": {"mean": list(self.prior_mean), "cov": [list(r) for r in self.prior_cov]},
            "model": {
                "type": self.model_type,
                "params": self.model_params,
                "R": [list(r) for r in self.R],
                "y_obs": list(self.y_obs),
            },
            "run": {
                "flow": self.flow,
                "order": self.order,
                "N": self.n_particles,
                "dlambda": self.dlambda,
                "diffusion": self.diffusion,
                "seed": self.seed,
            },
        }
        if self.grid_bounds is not None:
            data["grid"] = {"bounds": list(self.grid_bounds), "resolution": self.grid_resolution}
        return data

    @classmethod
    def from_dict(cls, data: dict) -> Scenario:
        return cls(**_fields_from_dict(data))

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"

    @classmethod
    def from_json(cls, text: str) -> Scenario:
        try:
            data = json.loads(text)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"scenario is not valid JSON: {exc}") from None
        return cls.from_dict(data)

    def save(self, path) -> None:
        Path(path).write_text(self.to_json())

    @classmethod
    def load(cls, path) -> Scenario:
        try:
            text = Path(path).read_text()
        except OSError as exc:
            raise ConfigError(f"cannot read scenario {path}: {exc}") from None
        return cls.from_json(text)

    def __eq__(self, other):
        if not isinstance(other, Scenario):
            return NotImplemented
        return self.to_dict() == other.to_dict()

    __hash__ = None


def _freeze(a):
    a = np.asarray(a, dtype=float)
    if a.ndim == 0:
        a = a.reshape(1)
    if a.ndim == 1:
        return tuple(float(v) for v in a)
    return tuple(tuple(float(v) for v in row) for row in a)


def _fields_from_dict(data: dict) -> dict:
    if not isinstance(data, dict):
        raise ConfigError("scenario config must be a JSON object")
    try:
        prior, model = data["prior"], data["model"]
        run = data.get("run", {})
        fields = {
            "prior_mean": prior["mean"],
            "prior_cov": prior["cov"],
            "model_type": model["type"],
            "R": np.atleast_2d(model["R"]),
            "y_obs": model["y_obs"],
            "model_params": dict(model.get("params") or {}),
        }
    except (KeyError, TypeError) as exc:
        raise ConfigError(f"scenario config is missing field {exc}") from None
    keys = {"flow": "flow", "order": "order", "N": "n_particles", "dlambda": "dlambda",
            "diffusion": "diffusion", "seed": "seed"}
    unknown = set(run) - set(keys)
    if unknown:
        raise ConfigError(f"unknown run settings: {sorted(unknown)}")
    for src, dst in keys.items():
        if src in run:
            fields[dst] = run[src]
    if "grid" in data:
        fields["grid_bounds"] = data["grid"]["bounds"]
        fields["grid_resolution"] = data["grid"].get("resolution", 400)
    if "name" in data:
        fields["name"] = data["name"]
    return fields


def builtin_range_scenario() -> Scenario:
    """Range-only update of a 2-D prior far from the measured circle."""
    return Scenario(
        prior_mean=(-3.5, 0.0),
        prior_cov=((1.0, 0.5), (0.5, 1.0)),
        model_type="range",
        R=((0.1**2,),),
        y_obs=(1.0,),
        flow="dapff-v1",
        order=8,
        n_particles=200,
        dlambda=1.0 / 50.0,
        grid_bounds=(-4.0, 1.0, -3.0, 3.0),
        grid_resolution=600,
        name="range",
    )


BUILTIN_SCENARIOS = {"range": builtin_range_scenario}


def resolve_scenario(spec: str) -> Scenario:
    """``builtin:<name>`` or a path to a JSON config."""
    if spec.startswith("builtin:"):
        key = spec.split(":", 1)[1]
        if key not in BUILTIN_SCENARIOS:
            raise ConfigError(f"unknown builtin scenario {key!r}; known: {sorted(BUILTIN_SCENARIOS)}")
        return BUILTIN_SCENARIOS[key]()
    return Scenario.load(spec)


# -- oracles ---------------------------------------------------------------


class GridError(ValueError):
    """The grid does not resolve the posterior."""


@dataclass(frozen=True, eq=False)
class GridPosterior:
    """Posterior density tabulated at the cell centers of a rectangular grid."""

    axes: tuple
    density: np.ndarray
    cell_volume: float

    @property
    def dim(self) -> int:
        return len(self.axes)

    @cached_property
    def points(self) -> np.ndarray:
        mesh = np.meshgrid(*self.axes, indexing="ij")
        return np.stack([m.ravel() for m in mesh], axis=-1)

    @cached_property
    def weights(self) -> np.ndarray:
        return self.density.ravel() * self.cell_volume

    @property
    def total_mass(self) -> float:
        return float(self.weights.sum())

    @cached_property
    def mean(self) -> np.ndarray:
        return self.weights @ self.points

    @cached_property
    def cov(self) -> np.ndarray:
        dev = self.points - self.mean
        cov = (dev * self.weights[:, None]).T @ dev
        return 0.5 * (cov + cov.T)

    def mass(self, mask_fn) -> float:
        """Posterior probability of the region where ``mask_fn(points)`` is true."""
        return float(self.weights[np.asarray(mask_fn(self.points), dtype=bool)].sum())

    def sample(self, count: int = ENERGY_SAMPLES, seed: int = 0) -> np.ndarray:
        """Draw ``count`` points: a cell by its mass, then uniform within the cell."""
        rng = np.random.default_rng(seed)
        cells = rng.choice(len(self.weights), size=count, p=self.weights / self.weights.sum())
        steps = np.array([ax[1] - ax[0] if len(ax) > 1 else 0.0 for ax in self.axes])
        return self.points[cells] + (rng.random((count, self.dim)) - 0.5) * steps


def _cell_centers(lo: float, hi: float, res: int) -> np.ndarray:
    step = (hi - lo) / res
    return lo + step * (np.arange(res) + 0.5)


def grid_log_posterior(prior: GaussianPrior, model: MeasurementModel, points: np.ndarray) -> np.ndarray:
    """Unnormalized log prior plus log likelihood at ``points`` of shape ``(M, n)``."""
    dev = points - prior.mean
    log_prior = -0.5 * np.einsum("mi,ij,mj->m", dev, prior.precision, dev)
    resid = model.evaluate(points) - model.y_obs
    log_lik = -0.5 * np.einsum("mi,ij,mj->m", resid, model.R_inv, resid)
    return log_prior + log_lik


def grid_posterior(scenario: Scenario, bounds=None, resolution: int | None = None) -> GridPosterior:
    """Tabulate and normalize ``p(x) L(x)`` on a grid of cell centers.

    ``bounds`` is ``(lo_0, hi_0, lo_1, hi_1, ...)``.  Raises :class:`GridError`
    when posterior mass sits on the grid boundary or when halving the
    resolution moves the normalizing constant by more than ``1e-3``.
    """
    bounds = scenario.grid_bounds if bounds is None else tuple(bounds)
    resolution = scenario.grid_resolution if resolution is None else int(resolution)
    n = scenario.prior.dim
    if bounds is None:
        sd = np.sqrt(np.diag(scenario.prior.cov))
        bounds = tuple(np.ravel(np.column_stack([scenario.prior.mean - 6 * sd, scenario.prior.mean + 6 * sd])))
    if len(bounds) != 2 * n:
        raise GridError(f"need {2 * n} bounds for a {n}-D state, got {len(bounds)}")
    if resolution < 2:
        raise GridError("grid resolution must be at least 2")
    axes = tuple(_cell_centers(bounds[2 * i], bounds[2 * i + 1], resolution) for i in range(n))
    if any(bounds[2 * i + 1] <= bounds[2 * i] for i in range(n)):
        raise GridError("grid bounds must be increasing")
    cell_volume = float(np.prod([(bounds[2 * i + 1] - bounds[2 * i]) / resolution for i in range(n)]))

    mesh = np.meshgrid(*axes, indexing="ij")
    points = np.stack([m.ravel() for m in mesh], axis=-1)
    logp = grid_log_posterior(scenario.prior, scenario.model, points)
    dens = np.exp(logp - logp.max()).reshape((resolution,) * n)

    total = dens.sum()
    boundary = np.zeros_like(dens, dtype=bool)
    for i in range(n):
        idx = [slice(None)] * n
        idx[i] = [0, resolution - 1]
        boundary[tuple(idx)] = True
    if dens[boundary].sum() > BOUNDARY_MASS_TOL * total:
        raise GridError("posterior mass reaches the grid boundary; widen the bounds")
    if resolution >= 4:
        # the same integral on the sub-grid of every other cell
        coarse = dens[(slice(None, None, 2),) * n].sum() * 2**n
        if abs(coarse - total) > COARSENESS_TOL * total:
            raise GridError("grid too coarse to resolve the posterior; raise the resolution")
    return GridPosterior(axes, dens / (total * cell_volume), cell_volume)


def kalman_update(scenario: Scenario) -> tuple[np.ndarray, np.ndarray]:
    """Closed-form posterior mean and covariance for an affine measurement model."""
    affine = scenario.model.affine
    if affine is None:
        raise ConfigError(f"kalman_update needs an affine model, got {scenario.model.name!r}")
    H, b = affine
    m, P, R = scenario.prior.mean, scenario.prior.cov, scenario.model.R
    S = H @ P @ H.T + R
    K = np.linalg.solve(S, H @ P).T
    mean = m + K @ (scenario.model.y_obs - H @ m - b)
    joseph = np.eye(len(m)) - K @ H
    cov = joseph @ P @ joseph.T + K @ R @ K.T
    return mean, 0.5 * (cov + cov.T)


def mean_pairwise_distance(a: np.ndarray, b: np.ndarray, chunk: int = 2048) -> float:
    """``E||a_i - b_j||`` over all pairs, in row chunks to bound memory."""
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    total = 0.0
    for start in range(0, len(a), chunk):
        total += cdist(a[start:start + chunk], b).sum()
    return total / (len(a) * len(b))


def energy_distance(x, y, yy: float | None = None) -> float:
    """Energy distance ``2 E|X-Y| - E|X-X'| - E|Y-Y'|`` between two samples.

    ``yy`` may carry a precomputed ``E|Y-Y'|`` when ``y`` is a fixed reference.
    """
    if yy is None:
        yy = mean_pairwise_distance(y, y)
    return 2.0 * mean_pairwise_distance(x, y) - mean_pairwise_distance(x, x) - yy


@dataclass(eq=False)
class EnergyReference:
    """Grid-posterior sample with its self-distance cached for repeated comparisons."""

    samples: np.ndarray
    self_distance: float = field(init=False)

    def __post_init__(self):
        self.samples = np.asarray(self.samples, dtype=float)
        self.self_distance = mean_pairwise_distance(self.samples, self.samples)

    @classmethod
    def from_grid(cls, grid: GridPosterior, count: int = ENERGY_SAMPLES, seed: int = 0) -> EnergyReference:
        return cls(grid.sample(count, seed))

    def distance(self, states) -> float:
        return energy_distance(states, self.samples, yy=self.self_distance)


def range_residual(states, radius: float = 1.0) -> float:
    """Mean absolute deviation of the particle ranges from ``radius``."""
    return float(np.mean(np.abs(np.linalg.norm(np.asarray(states), axis=-1) - radius)))
