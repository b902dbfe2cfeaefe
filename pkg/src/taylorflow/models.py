"""Gaussian priors and measurement models expressed over DA arithmetic.

A measurement function is a callable taking a sequence of state components
and returning a list of measurement components.  The components can be
floats, numpy arrays (a batch of states) or :class:`~taylorflow.dapoly.TruncatedPoly`
objects, so the same code produces numeric values and Taylor expansions.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from functools import cached_property

import numpy as np

from . import dapoly
from .dapoly import DAContext, TruncatedPoly, make_var
from .errors import ConfigError
from .numerics import sym_inverse, sym_matrix


@dataclass(frozen=True, eq=False)
class GaussianPrior:
    mean: np.ndarray
    cov: np.ndarray

    def __post_init__(self):
        mean = np.array(self.mean, dtype=float).reshape(-1)
        cov = sym_matrix(np.atleast_2d(np.array(self.cov, dtype=float)))
        if cov.shape != (len(mean), len(mean)):
            raise ValueError(f"covariance shape {cov.shape} does not match mean of length {len(mean)}")
        if np.any(np.linalg.eigvalsh(cov) <= 0):
            raise ValueError("prior covariance must be positive definite")
        object.__setattr__(self, "mean", mean)
        object.__setattr__(self, "cov", cov)

    @property
    def dim(self) -> int:
        return len(self.mean)

    @cached_property
    def precision(self) -> np.ndarray:
        return sym_inverse(self.cov)


class RangeFunction:
    """Euclidean norm of the state, ``h(x) = ||x||``."""

    name = "range"

    def __init__(self):
        self.params = {}

    def __call__(self, x):
        return [dapoly.sqrt(sum(xi * xi for xi in x))]

    def output_dim(self, nx: int) -> int:
        return 1

    @property
    def affine(self):
        return None


class AffineFunction:
    """``h(x) = H x + b``."""

    name = "affine"

    def __init__(self, H, b=None):
        self.H = np.atleast_2d(np.array(H, dtype=float))
        self.b = np.zeros(len(self.H)) if b is None else np.array(b, dtype=float).reshape(-1)
        if len(self.b) != len(self.H):
            raise ValueError("affine offset length does not match H")
        self.params = {"H": self.H.tolist(), "b": self.b.tolist()}

    def __call__(self, x):
        if len(x) != self.H.shape[1]:
            raise ValueError(f"affine model expects {self.H.shape[1]} state components, got {len(x)}")
        out = []
        for row, off in zip(self.H, self.b):
            acc = x[0] * row[0]
            for xj, hj in zip(x[1:], row[1:]):
                acc = acc + xj * hj
            out.append(acc + off)
        return out

    def output_dim(self, nx: int) -> int:
        return len(self.H)

    @property
    def affine(self):
        return self.H, self.b


MEASUREMENT_REGISTRY = {
    "range": lambda params: RangeFunction(**params),
    "affine": lambda params: AffineFunction(**params),
}


def measurement_function(kind: str, params: dict | None = None):
    try:
        factory = MEASUREMENT_REGISTRY[kind]
    except KeyError:
        raise ConfigError(f"unknown measurement model {kind!r}; known: {sorted(MEASUREMENT_REGISTRY)}") from None
    try:
        return factory(dict(params or {}))
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"bad parameters for {kind!r} model: {exc}") from None


@dataclass(frozen=True, eq=False)
class MeasurementModel:
    """Measurement function with Gaussian noise covariance ``R`` and the observed value."""

    h: object
    R: np.ndarray
    y_obs: np.ndarray
    name: str = field(default="")

    def __post_init__(self):
        y = np.array(self.y_obs, dtype=float).reshape(-1)
        R = sym_matrix(np.atleast_2d(np.array(self.R, dtype=float)))
        if R.shape != (len(y), len(y)):
            raise ValueError(f"R shape {R.shape} does not match measurement of length {len(y)}")
        if np.any(np.linalg.eigvalsh(R) <= 0):
            raise ValueError("measurement noise covariance must be positive definite")
        object.__setattr__(self, "y_obs", y)
        object.__setattr__(self, "R", R)
        if not self.name:
            object.__setattr__(self, "name", getattr(self.h, "name", "custom"))

    @classmethod
    def from_registry(cls, kind: str, R, y_obs, params: dict | None = None) -> MeasurementModel:
        return cls(measurement_function(kind, params), R, y_obs, name=kind)

    @property
    def dim(self) -> int:
        return len(self.y_obs)

    @cached_property
    def R_inv(self) -> np.ndarray:
        return sym_inverse(self.R)

    @property
    def affine(self):
        """``(H, b)`` when the model is affine, else ``None``."""
        return getattr(self.h, "affine", None)

    def evaluate(self, states) -> np.ndarray:
        """Numeric ``h`` for states of shape ``(..., n)``; returns ``(..., m)``."""
        states = np.asarray(states, dtype=float)
        out = self.h([states[..., i] for i in range(states.shape[-1])])
        return np.stack(np.broadcast_arrays(*[np.asarray(o, dtype=float) for o in out]), axis=-1)

    def expand(self, xs: list[TruncatedPoly]) -> list[TruncatedPoly]:
        """Taylor expansion of ``h`` composed with the state polynomials ``xs``."""
        ctx = xs[0].ctx
        return [y if isinstance(y, TruncatedPoly) else ctx.constant(y) for y in self.h(xs)]

    def linearize(self, states) -> tuple[np.ndarray, np.ndarray]:
        """Value and Jacobian of ``h`` at each state from a first-order expansion.

        Returns ``h`` with shape ``(..., m)`` and ``H`` with shape ``(..., m, n)``.
        """
        states = np.asarray(states, dtype=float)
        n = states.shape[-1]
        ctx = DAContext(n, 1)
        ys = self.expand([make_var(ctx, i, states[..., i]) for i in range(n)])
        batch = states.shape[:-1]
        hx = np.stack([np.broadcast_to(y.coef[0], batch) for y in ys], axis=-1)
        jac = np.stack(
            [np.stack([np.broadcast_to(y.coef[1 + i], batch) for i in range(n)], axis=-1) for y in ys],
            axis=-2,
        )
        return hx, jac

    def log_likelihood_poly(self, ys: list[TruncatedPoly]) -> TruncatedPoly:
        """``-1/2 (y - y_obs)^T R^-1 (y - y_obs)`` for measurement polynomials ``ys``."""
        resid = [y - yo for y, yo in zip(ys, self.y_obs)]
        r_inv = self.R_inv
        acc = resid[0].ctx.zero()
        for k, rk in enumerate(resid):
            for l, rl in enumerate(resid):
                if r_inv[k, l] != 0.0:
                    acc = acc + dapoly.mul(rk, rl) * r_inv[k, l]
        return acc * -0.5
