"""Flow fields: drift and diffusion of the particle flow at pseudo-time ``lam``.

Four fields share one calling convention.  Each accepts either a single state
(shape ``(n,)``), in which case failures raise, or a batch ``(N, n)``, in which
case particles whose evaluation fails (intrinsic domain violations, singular
or indefinite Hessians) are reported through ``FlowEval.valid`` instead.

The DA fields build the log-posterior polynomial ``P = T + lam * L`` from the
log-prior ``T`` and log-likelihood ``L`` polynomials and derive

    F = -Hess(P)^-1 grad(L)           (drift polynomial)
    Q = Hess(P)^-1 grad(F)^T          (diffusion polynomial, then symmetrized)

which for an affine measurement function reproduce the Gromov flow exactly.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import dapoly
from .dapoly import DAContext, TruncatedPoly, make_var
from .errors import BatchedFailure, ConfigError, SingularMatrixError
from .models import GaussianPrior, MeasurementModel

FLOW_NAMES = ("exact", "gromov", "dapff-v1", "dapff-v2")
V2_WORKING_ORDER = 3
MAX_CONDITION = 1e12


@dataclass(frozen=True)
class FlowKind:
    name: str
    order: int | None = None

    def __post_init__(self):
        if self.name not in FLOW_NAMES:
            raise ConfigError(f"unknown flow {self.name!r}; expected one of {FLOW_NAMES}")
        if self.name == "dapff-v1":
            if self.order is None or self.order < 2:
                raise ConfigError("dapff-v1 needs expansion order >= 2")
        elif self.name == "dapff-v2":
            if self.order is None or not 1 <= self.order <= 3:
                raise ConfigError("dapff-v2 supports expansion orders 1 to 3")
        elif self.order is not None:
            object.__setattr__(self, "order", None)

    @property
    def label(self) -> str:
        return {
            "exact": "exact",
            "gromov": "Gromov",
            "dapff-v1": f"DAPFFv1-{self.order}",
            "dapff-v2": f"DAPFFv2-{self.order}",
        }[self.name]

    @property
    def has_diffusion(self) -> bool:
        return self.name != "exact"


@dataclass
class FlowEval:
    drift: np.ndarray
    diffusion: np.ndarray
    valid: np.ndarray | bool = True


# -- helpers -----------------------------------------------------------------


def _batched_inverse(a: np.ndarray) -> np.ndarray:
    cond = np.linalg.cond(a)
    bad = ~np.isfinite(cond) | (cond >= MAX_CONDITION)
    if np.any(bad):
        raise SingularMatrixError("singular matrix in flow evaluation", mask=bad)
    return np.linalg.inv(a)


def _symmetrize(q: np.ndarray) -> np.ndarray:
    return 0.5 * (q + np.swapaxes(q, -1, -2))


def _guarded(compute, states: np.ndarray) -> FlowEval:
    """Evaluate ``compute`` on a batch, dropping members that fail."""
    states = np.asarray(states, dtype=float)
    count, n = states.shape
    valid = np.ones(count, dtype=bool)
    drift = np.zeros((count, n))
    diffusion = np.zeros((count, n, n))
    while valid.any():
        idx = np.flatnonzero(valid)
        try:
            f, q = compute(states[idx])
        except BatchedFailure as exc:
            if exc.mask is None or exc.mask.shape != (len(idx),):
                valid[idx] = False
            else:
                valid[idx[exc.mask]] = False
            continue
        drift[idx] = f
        diffusion[idx] = q
        break
    return FlowEval(drift, diffusion, valid)


def _dispatch(compute, x) -> FlowEval:
    x = np.asarray(x, dtype=float)
    if x.ndim == 1:
        f, q = compute(x[None])
        return FlowEval(f[0], q[0], True)
    return _guarded(compute, x)


# -- Gromov and exact flows ------------------------------------------------


def _gromov(states, lam, prior: GaussianPrior, model: MeasurementModel):
    hx, jac = model.linearize(states)
    ht_rinv = np.swapaxes(jac, -1, -2) @ model.R_inv  # (N, n, m)
    s = _batched_inverse(prior.precision + lam * ht_rinv @ jac)
    gain = s @ ht_rinv
    drift = -(gain @ (hx - model.y_obs)[..., None])[..., 0]
    diffusion = _symmetrize(gain @ jac @ s)
    return drift, diffusion


def gromov_field(x, lam: float, prior: GaussianPrior, model: MeasurementModel) -> FlowEval:
    """Gromov flow with the measurement Jacobian taken at each particle.

    ``S = (P^-1 + lam H^T R^-1 H)^-1``, ``f = -S H^T R^-1 (h(x) - y)`` and
    ``Q = S H^T R^-1 H S``.
    """
    return _dispatch(lambda s: _gromov(s, lam, prior, model), x)


def exact_coefficients(states, lam, prior: GaussianPrior, model: MeasurementModel):
    """``(A, b)`` of the exact flow ``f = A x + b`` for states of shape ``(N, n)``.

    ``A = -1/2 P H^T (lam H P H^T + R)^-1 H`` and
    ``b = (I + 2 lam A) (A x_prior + (I + lam A) P H^T R^-1 r)`` with
    ``r = y - h(x) + H x`` and ``H`` the Jacobian at each state.
    """
    states = np.asarray(states, dtype=float)
    hx, jac = model.linearize(states)
    eye = np.eye(states.shape[-1])
    p = prior.cov
    jac_t = np.swapaxes(jac, -1, -2)
    innov_cov = lam * jac @ p @ jac_t + model.R
    a = -0.5 * p @ jac_t @ _batched_inverse(innov_cov) @ jac
    resid = model.y_obs - hx + (jac @ states[..., None])[..., 0]
    inner = (a @ prior.mean) + ((eye + lam * a) @ p @ jac_t @ model.R_inv @ resid[..., None])[..., 0]
    b = ((eye + 2.0 * lam * a) @ inner[..., None])[..., 0]
    return a, b


def _exact(states, lam, prior: GaussianPrior, model: MeasurementModel):
    a, b = exact_coefficients(states, lam, prior, model)
    drift = (a @ states[..., None])[..., 0] + b
    n = states.shape[-1]
    return drift, np.zeros((len(states), n, n))


def exact_field(x, lam: float, prior: GaussianPrior, model: MeasurementModel) -> FlowEval:
    """Exact (zero-diffusion) flow ``f = A x + b`` with per-particle linearization.

    See :func:`exact_coefficients` for ``A`` and ``b``.
    """
    return _dispatch(lambda s: _exact(s, lam, prior, model), x)


# -- DA flows ------------------------------------------------------------------


def _check_definite(h0: np.ndarray) -> None:
    """Raise unless ``-h0`` is positive definite for every batch member."""
    eig_max = np.linalg.eigvalsh(_symmetrize(h0))[..., -1]
    bad = ~(eig_max < 0)
    if np.any(bad):
        raise SingularMatrixError("log-posterior Hessian is not negative definite", mask=bad)


def flow_polynomials(hess_prior, hess_loglik, grad_loglik, lam: float):
    """Drift and diffusion polynomials at pseudo-time ``lam``.

    Returns ``(F, Q, hess)``: the drift vector polynomial, the symmetrized
    diffusion matrix polynomial and the log-posterior Hessian polynomial
    matrix, whose constant part is checked for negative definiteness.
    """
    hess = dapoly.polymat_add(
        hess_prior, [[dapoly.scale(p, lam) for p in row] for row in hess_loglik]
    )
    _check_definite(dapoly.constant_part(hess))
    hess_inv = dapoly.polymat_inverse(hess)
    drift = [-p for p in dapoly.polymat_vec(hess_inv, grad_loglik)]
    grad_drift_t = dapoly.transpose(dapoly.jacobian(drift))
    diffusion = dapoly.symmetrize(dapoly.polymat_mul(hess_inv, grad_drift_t))
    return drift, diffusion, hess


def _quadratic_form(dev: list[TruncatedPoly], mat: np.ndarray) -> TruncatedPoly:
    acc = dev[0].ctx.zero()
    for i, di in enumerate(dev):
        for j, dj in enumerate(dev):
            if mat[i, j] != 0.0:
                acc = acc + dapoly.mul(di, dj) * mat[i, j]
    return acc


@dataclass
class V1UpdateContext:
    """Expansion about the prior mean shared by every particle of an update.

    The flow polynomials are rebuilt only when ``lam`` changes.
    """

    prior: GaussianPrior
    model: MeasurementModel
    order: int
    ctx: DAContext
    log_prior: TruncatedPoly
    log_lik: TruncatedPoly
    grad_loglik: list = field(repr=False)
    hess_prior: list = field(repr=False)
    hess_loglik: list = field(repr=False)
    _lam: float | None = field(default=None, repr=False)
    _polys: tuple | None = field(default=None, repr=False)

    def polynomials(self, lam: float):
        """``(F, Q, hess)`` at ``lam``, cached for repeated calls with the same ``lam``."""
        lam = float(lam)
        if self._lam != lam:
            self._polys = None
            self._polys = flow_polynomials(self.hess_prior, self.hess_loglik, self.grad_loglik, lam)
            self._lam = lam
        return self._polys


def v1_prepare(prior: GaussianPrior, model: MeasurementModel, order: int) -> V1UpdateContext:
    """Build the prior and likelihood polynomials expanded at the prior mean."""
    FlowKind("dapff-v1", order)
    n = prior.dim
    ctx = DAContext(n, order)
    xs = [make_var(ctx, i, prior.mean[i]) for i in range(n)]
    dev = [make_var(ctx, i) for i in range(n)]
    log_prior = _quadratic_form(dev, prior.precision) * -0.5
    log_lik = model.log_likelihood_poly(model.expand(xs))
    return V1UpdateContext(
        prior=prior,
        model=model,
        order=order,
        ctx=ctx,
        log_prior=log_prior,
        log_lik=log_lik,
        grad_loglik=dapoly.gradient(log_lik),
        hess_prior=dapoly.hessian(log_prior),
        hess_loglik=dapoly.hessian(log_lik),
    )


def v1_field(ctx: V1UpdateContext, lam: float, dx) -> FlowEval:
    """Drift and diffusion polynomials evaluated at the particle deviation(s) ``dx``.

    A deviation where the log-posterior Hessian polynomial is not negative
    definite lies outside the region where the expansion describes a concave
    posterior; its evaluation fails like any other singular Hessian.
    """
    if not 0.0 <= lam <= 1.0:
        raise ValueError(f"lam must lie in [0, 1], got {lam}")

    def compute(points):
        drift, diffusion, hess = ctx.polynomials(lam)
        f = dapoly.eval_vec(drift, points)
        q = dapoly.eval_mat(diffusion, points)
        bad = ~(np.all(np.isfinite(f), axis=-1) & np.all(np.isfinite(q), axis=(-2, -1)))
        if bad.any():
            raise SingularMatrixError("non-finite drift or diffusion", mask=bad)
        _check_definite(dapoly.eval_mat(hess, points))
        return f, q

    return _dispatch(compute, dx)


def _v2(states, lam, prior: GaussianPrior, model: MeasurementModel, order: int):
    n = states.shape[-1]
    ctx = DAContext(n, V2_WORKING_ORDER)
    xs = [make_var(ctx, i, states[:, i]) for i in range(n)]
    ys = [dapoly.truncate(y, order) for y in model.expand(xs)]
    dev = [x - m for x, m in zip(xs, prior.mean)]
    log_prior = _quadratic_form(dev, prior.precision) * -0.5
    log_lik = model.log_likelihood_poly(ys)
    drift, diffusion, _ = flow_polynomials(
        dapoly.hessian(log_prior), dapoly.hessian(log_lik), dapoly.gradient(log_lik), lam
    )
    f = np.stack([np.broadcast_to(p.coef[0], (len(states),)) for p in drift], axis=-1)
    q = np.broadcast_to(dapoly.constant_part(diffusion), (len(states), n, n))
    return f, np.array(q)


def v2_field(x, lam: float, prior: GaussianPrior, model: MeasurementModel, order: int) -> FlowEval:
    """DA flow expanded at each particle; returns the constant parts of ``F`` and ``Q``.

    The measurement function is expanded to ``order`` (1..3) while the log
    densities are carried to third order, enough for the diffusion term's
    constant part.
    """
    FlowKind("dapff-v2", order)
    return _dispatch(lambda s: _v2(s, lam, prior, model, order), x)


def make_field(kind: FlowKind, prior: GaussianPrior, model: MeasurementModel):
    """Return ``field(states, lam) -> FlowEval`` for a batch of states."""
    if kind.name == "gromov":
        return lambda states, lam: _guarded(lambda s: _gromov(s, lam, prior, model), states)
    if kind.name == "exact":
        return lambda states, lam: _guarded(lambda s: _exact(s, lam, prior, model), states)
    if kind.name == "dapff-v2":
        return lambda states, lam: _guarded(lambda s: _v2(s, lam, prior, model, kind.order), states)

    ctx = v1_prepare(prior, model, kind.order)
    return lambda states, lam: v1_field(ctx, lam, np.asarray(states) - prior.mean[None, :])
