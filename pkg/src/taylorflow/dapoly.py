"""Truncated multivariate Taylor polynomial algebra.

A :class:`TruncatedPoly` holds the Taylor coefficients of a function of the
deviation variables ``dx_0 .. dx_{n-1}`` up to total degree ``order``.  All
arithmetic discards monomials above that degree as it goes, so every
intermediate result carries at most ``C(nvars + order, order)`` coefficients.

Coefficients are stored densely in graded-lexicographic monomial order with an
optional trailing *batch* shape: ``coef.shape == (ctx.size, *batch_shape)``.
A batched polynomial is simply many independent polynomials evaluated in
lock-step (one per particle, typically); all operations broadcast over the
batch axes with the usual numpy rules.  The sparse view required by callers
that want ``{exponents: coefficient}`` is available through
:attr:`TruncatedPoly.coeffs`.

Vectors and matrices of polynomials (gradients, Hessians, drift and diffusion
polynomials) are plain nested lists of :class:`TruncatedPoly` sharing one
context.

Example
-------
>>> ctx = DAContext(2, 3)
>>> x = make_var(ctx, 0, 4.0)
>>> r = sqrt(x)
>>> round(r.const, 12), round(r.coeffs[(1, 0)], 12)
(2.0, 0.25)
"""

from __future__ import annotations

import functools
import itertools
import math
import numbers
from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp

from .errors import ContextMismatchError, DomainError, SingularMatrixError

ZERO_TOL = 1e-300
DOMAIN_MARGIN = 1e-12
MAX_CONDITION = 1e12

INTRINSICS = ("sqrt", "exp", "log", "sin", "cos", "recip", "pow")


@dataclass(frozen=True)
class DAContext:
    """Number of deviation variables and truncation order of an algebra."""

    nvars: int
    order: int

    def __post_init__(self):
        if not isinstance(self.nvars, numbers.Integral) or self.nvars < 1:
            raise ValueError(f"nvars must be a positive integer, got {self.nvars!r}")
        if not isinstance(self.order, numbers.Integral) or self.order < 1:
            raise ValueError(f"order must be a positive integer, got {self.order!r}")

    @property
    def tables(self) -> _Tables:
        return _tables(int(self.nvars), int(self.order))

    @property
    def size(self) -> int:
        """Number of monomials of degree <= order."""
        return len(self.tables.exponents)

    @property
    def exponents(self) -> list[tuple[int, ...]]:
        return self.tables.exponent_tuples

    def zero(self, batch_shape=()) -> TruncatedPoly:
        return TruncatedPoly._wrap(self, np.zeros((self.size, *batch_shape)))

    def constant(self, value) -> TruncatedPoly:
        value = np.asarray(value, dtype=float)
        coef = np.zeros((self.size, *value.shape))
        coef[0] = value
        return TruncatedPoly._wrap(self, coef)

    def var(self, i: int, center=0.0) -> TruncatedPoly:
        return make_var(self, i, center)


class _Tables:
    """Index tables for one (nvars, order) pair, built once and cached."""

    def __init__(self, nvars: int, order: int):
        exps = []
        for d in range(order + 1):
            for combo in itertools.combinations_with_replacement(range(nvars), d):
                e = [0] * nvars
                for v in combo:
                    e[v] += 1
                exps.append(tuple(e))
        self.exponent_tuples = exps
        self.index = {e: k for k, e in enumerate(exps)}
        self.exponents = np.array(exps, dtype=np.int64).reshape(len(exps), nvars)
        self.degree = self.exponents.sum(axis=1)

        size = len(exps)
        pi, pj, pk = [], [], []
        for i, ei in enumerate(exps):
            di = self.degree[i]
            for j, ej in enumerate(exps):
                if di + self.degree[j] > order:
                    continue
                pi.append(i)
                pj.append(j)
                pk.append(self.index[tuple(a + b for a, b in zip(ei, ej))])
        self.pair_i = np.array(pi, dtype=np.int64)
        self.pair_j = np.array(pj, dtype=np.int64)
        self.scatter = sp.csr_matrix(
            (np.ones(len(pk)), (np.array(pk, dtype=np.int64), np.arange(len(pk)))),
            shape=(size, len(pk)),
        )

        # d/d(dx_v): monomial src -> monomial dst with factor = exponent of v in src
        self.deriv = []
        for v in range(nvars):
            src, dst, fac = [], [], []
            for k, e in enumerate(exps):
                if e[v] == 0:
                    continue
                lowered = list(e)
                lowered[v] -= 1
                src.append(k)
                dst.append(self.index[tuple(lowered)])
                fac.append(float(e[v]))
            self.deriv.append(
                (np.array(src, dtype=np.int64), np.array(dst, dtype=np.int64), np.array(fac))
            )


@functools.lru_cache(maxsize=None)
def _tables(nvars: int, order: int) -> _Tables:
    return _Tables(nvars, order)


def _is_numeric(x) -> bool:
    return isinstance(x, (numbers.Real, np.ndarray, np.generic))


def _batch_expand(coef: np.ndarray, ndim: int) -> np.ndarray:
    """Insert singleton axes after the monomial axis so batch dims right-align."""
    missing = ndim - coef.ndim
    if missing <= 0:
        return coef
    return coef.reshape((coef.shape[0],) + (1,) * missing + coef.shape[1:])


class TruncatedPoly:
    """Immutable truncated Taylor polynomial in the deviations of a :class:`DAContext`."""

    __slots__ = ("ctx", "coef")
    __array_ufunc__ = None  # make numpy scalars/arrays defer to our reflected operators

    def __init__(self, ctx: DAContext, coef):
        coef = np.array(coef, dtype=float)
        if coef.ndim == 0 or coef.shape[0] != ctx.size:
            raise ValueError(f"expected {ctx.size} coefficients on axis 0, got shape {coef.shape}")
        self._init(ctx, coef)

    def _init(self, ctx, coef):
        coef[np.abs(coef) < ZERO_TOL] = 0.0
        coef.flags.writeable = False
        object.__setattr__(self, "ctx", ctx)
        object.__setattr__(self, "coef", coef)

    @classmethod
    def _wrap(cls, ctx: DAContext, coef: np.ndarray) -> TruncatedPoly:
        # trusted fast path: coef is a fresh float array owned by the new poly
        p = object.__new__(cls)
        p._init(ctx, coef)
        return p

    def __setattr__(self, name, value):
        raise AttributeError("TruncatedPoly is immutable")

    @classmethod
    def from_dict(cls, ctx: DAContext, mapping: dict) -> TruncatedPoly:
        """Build from ``{exponent tuple: coefficient}``; exponents above the order are rejected."""
        coef = np.zeros(ctx.size)
        index = ctx.tables.index
        for exps, value in mapping.items():
            exps = tuple(int(e) for e in exps)
            if len(exps) != ctx.nvars or min(exps) < 0:
                raise ValueError(f"bad multi-index {exps} for {ctx.nvars} variables")
            if sum(exps) > ctx.order:
                raise ValueError(f"multi-index {exps} exceeds truncation order {ctx.order}")
            coef[index[exps]] += float(value)
        return cls._wrap(ctx, coef)

    @property
    def batch_shape(self) -> tuple[int, ...]:
        return self.coef.shape[1:]

    @property
    def const(self):
        """Constant coefficient (the value at zero deviation)."""
        c = self.coef[0]
        return float(c) if c.ndim == 0 else c.copy()

    @property
    def coeffs(self) -> dict[tuple[int, ...], float]:
        """Sparse view ``{exponents: coefficient}`` without explicit zeros."""
        if self.batch_shape:
            raise ValueError("sparse view is only defined for unbatched polynomials")
        exps = self.ctx.exponents
        return {exps[k]: float(self.coef[k]) for k in np.flatnonzero(self.coef)}

    @property
    def degree(self) -> int:
        """Highest degree carrying a nonzero coefficient (-1 for the zero polynomial)."""
        nz = np.any(self.coef.reshape(self.ctx.size, -1) != 0, axis=1)
        if not nz.any():
            return -1
        return int(self.ctx.tables.degree[nz].max())

    def __getitem__(self, index) -> TruncatedPoly:
        """Select batch members; the monomial axis is kept."""
        if not isinstance(index, tuple):
            index = (index,)
        return TruncatedPoly._wrap(self.ctx, np.array(self.coef[(slice(None),) + index]))

    def __repr__(self):
        if self.batch_shape:
            return f"TruncatedPoly(nvars={self.ctx.nvars}, order={self.ctx.order}, batch={self.batch_shape})"
        terms = []
        for exps, c in self.coeffs.items():
            mono = "*".join(
                f"dx{v}" + (f"^{e}" if e > 1 else "") for v, e in enumerate(exps) if e
            )
            terms.append(f"{c:.6g}" + (f"*{mono}" if mono else ""))
        return "TruncatedPoly(" + (" + ".join(terms) or "0") + ")"

    def _coerce(self, other) -> TruncatedPoly:
        if isinstance(other, TruncatedPoly):
            _check_ctx(self, other)
            return other
        if _is_numeric(other):
            return self.ctx.constant(other)
        return NotImplemented

    def __add__(self, other):
        other = self._coerce(other)
        if other is NotImplemented:
            return other
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        other = self._coerce(other)
        if other is NotImplemented:
            return other
        return add(self, scale(other, -1.0))

    def __rsub__(self, other):
        other = self._coerce(other)
        if other is NotImplemented:
            return other
        return add(other, scale(self, -1.0))

    def __neg__(self):
        return scale(self, -1.0)

    def __pos__(self):
        return self

    def __mul__(self, other):
        if isinstance(other, TruncatedPoly):
            return mul(self, other)
        if _is_numeric(other):
            return scale(self, other)
        return NotImplemented

    __rmul__ = __mul__

    def __truediv__(self, other):
        if isinstance(other, TruncatedPoly):
            return mul(self, recip(other))
        if _is_numeric(other):
            return scale(self, 1.0 / np.asarray(other, dtype=float))
        return NotImplemented

    def __rtruediv__(self, other):
        if _is_numeric(other):
            return scale(recip(self), other)
        return NotImplemented

    def __pow__(self, exponent):
        return power(self, exponent)


def _check_ctx(p: TruncatedPoly, q: TruncatedPoly) -> None:
    if p.ctx != q.ctx:
        raise ContextMismatchError(f"cannot combine polynomials from {p.ctx} and {q.ctx}")


def _common_ctx(polys) -> DAContext:
    polys = list(polys)
    ctx = polys[0].ctx
    for p in polys[1:]:
        _check_ctx(polys[0], p)
    return ctx


def make_var(ctx: DAContext, i: int, center=0.0) -> TruncatedPoly:
    """Return ``center + dx_i``; ``center`` may be an array to build a batch."""
    if not 0 <= i < ctx.nvars:
        raise IndexError(f"variable index {i} out of range for {ctx.nvars} variables")
    center = np.asarray(center, dtype=float)
    coef = np.zeros((ctx.size, *center.shape))
    coef[0] = center
    coef[1 + i] = 1.0  # degree-1 monomials follow the constant in variable order
    return TruncatedPoly._wrap(ctx, coef)


def add(p: TruncatedPoly, q: TruncatedPoly) -> TruncatedPoly:
    _check_ctx(p, q)
    nd = max(p.coef.ndim, q.coef.ndim)
    return TruncatedPoly._wrap(p.ctx, _batch_expand(p.coef, nd) + _batch_expand(q.coef, nd))


def scale(p: TruncatedPoly, a) -> TruncatedPoly:
    """Multiply every coefficient by ``a`` (a real, or an array over the batch shape)."""
    return TruncatedPoly._wrap(p.ctx, p.coef * np.asarray(a, dtype=float))


def mul(p: TruncatedPoly, q: TruncatedPoly) -> TruncatedPoly:
    """Cauchy product, dropping every monomial above the truncation order."""
    _check_ctx(p, q)
    t = p.ctx.tables
    nd = max(p.coef.ndim, q.coef.ndim)
    a = _batch_expand(p.coef, nd)
    b = _batch_expand(q.coef, nd)
    prod = a[t.pair_i] * b[t.pair_j]
    batch = prod.shape[1:]
    out = t.scatter @ prod.reshape(prod.shape[0], -1)
    return TruncatedPoly._wrap(p.ctx, np.asarray(out).reshape((p.ctx.size, *batch)))


def truncate(p: TruncatedPoly, order: int) -> TruncatedPoly:
    """Zero all monomials of degree above ``order`` (context unchanged)."""
    keep = p.ctx.tables.degree <= order
    coef = np.array(p.coef)
    coef[~keep] = 0.0
    return TruncatedPoly._wrap(p.ctx, coef)


def partial(p: TruncatedPoly, i: int) -> TruncatedPoly:
    """Term-wise derivative with respect to ``dx_i``."""
    if not 0 <= i < p.ctx.nvars:
        raise IndexError(f"variable index {i} out of range for {p.ctx.nvars} variables")
    src, dst, fac = p.ctx.tables.deriv[i]
    coef = np.zeros_like(p.coef)
    coef[dst] = p.coef[src] * fac.reshape((-1,) + (1,) * (p.coef.ndim - 1))
    return TruncatedPoly._wrap(p.ctx, coef)


def gradient(p: TruncatedPoly) -> list[TruncatedPoly]:
    return [partial(p, i) for i in range(p.ctx.nvars)]


def jacobian(vec: list[TruncatedPoly]) -> list[list[TruncatedPoly]]:
    """``J[i][j] = d vec[i] / d dx_j``."""
    return [gradient(p) for p in vec]


def hessian(p: TruncatedPoly) -> list[list[TruncatedPoly]]:
    return jacobian(gradient(p))


def monomial_values(ctx: DAContext, point) -> np.ndarray:
    """Values of every monomial at ``point`` (shape ``(..., nvars)``) -> ``(..., size)``."""
    point = np.asarray(point, dtype=float)
    if point.ndim == 0 or point.shape[-1] != ctx.nvars:
        raise ValueError(f"point must have trailing dimension {ctx.nvars}, got shape {point.shape}")
    powers = point[..., None] ** np.arange(ctx.order + 1)  # (..., nvars, order+1)
    exps = ctx.tables.exponents
    out = powers[..., 0, exps[:, 0]]
    for v in range(1, ctx.nvars):
        out = out * powers[..., v, exps[:, v]]
    return out


def _eval_with(p: TruncatedPoly, values: np.ndarray):
    res = np.sum(values * np.moveaxis(p.coef, 0, -1), axis=-1)
    return float(res) if np.ndim(res) == 0 else res


def evaluate(p: TruncatedPoly, point):
    """Numeric value at the deviation ``point``.

    ``point`` has shape ``(..., nvars)``; the leading shape broadcasts against
    the polynomial's batch shape.
    """
    return _eval_with(p, monomial_values(p.ctx, point))


def eval_vec(vec: list[TruncatedPoly], point) -> np.ndarray:
    ctx = _common_ctx(vec)
    values = monomial_values(ctx, point)
    return np.stack([np.asarray(_eval_with(p, values)) for p in vec], axis=-1)


def eval_mat(mat: list[list[TruncatedPoly]], point) -> np.ndarray:
    ctx = _common_ctx(p for row in mat for p in row)
    values = monomial_values(ctx, point)
    rows = [np.stack([np.asarray(_eval_with(p, values)) for p in row], axis=-1) for row in mat]
    return np.stack(rows, axis=-2)


# -- intrinsics ---------------------------------------------------------------


def _series(name: str, a0: np.ndarray, order: int, exponent: float | None) -> list[np.ndarray]:
    """Taylor coefficients f^(k)(a0)/k! for k = 0..order."""
    if name == "exp":
        e = np.exp(a0)
        return [e / math.factorial(k) for k in range(order + 1)]
    if name == "log":
        return [np.log(a0)] + [(-1.0) ** (k + 1) / (k * a0**k) for k in range(1, order + 1)]
    if name in ("sin", "cos"):
        s, c = np.sin(a0), np.cos(a0)
        cycle = [s, c, -s, -c] if name == "sin" else [c, -s, -c, s]
        return [cycle[k % 4] / math.factorial(k) for k in range(order + 1)]
    if name == "recip":
        return [(-1.0) ** k / a0 ** (k + 1) for k in range(order + 1)]
    if name == "pow":
        out = [a0**exponent]
        for k in range(1, order + 1):
            out.append(out[-1] * (exponent - k + 1) / (k * a0))
        return out
    raise ValueError(f"unknown intrinsic {name!r}; expected one of {INTRINSICS}")


def _check_domain(name: str, a0: np.ndarray, exponent: float | None) -> None:
    if name in ("sqrt", "log") or (name == "pow" and exponent is not None):
        bad = ~(a0 > DOMAIN_MARGIN)
        rule = "positive"
    elif name == "recip":
        bad = ~(np.abs(a0) > DOMAIN_MARGIN)
        rule = "nonzero"
    else:
        bad = ~np.isfinite(a0)
        rule = "finite"
    if np.any(bad):
        raise DomainError(
            f"{name} needs a {rule} constant part at the expansion center "
            f"(got {a0[bad].ravel()[:3] if np.ndim(a0) else a0})",
            mask=bad,
        )


def apply_intrinsic(name: str, p: TruncatedPoly, exponent: float | None = None) -> TruncatedPoly:
    """Compose an elementary function with ``p``.

    Uses ``f(p) = sum_k f^(k)(a0)/k! (p - a0)^k`` for ``k <= order``; the sum
    is exact in the truncated algebra because ``p - a0`` has no constant term.
    ``name`` is one of ``sqrt, exp, log, sin, cos, recip, pow`` (``pow`` needs
    ``exponent``).
    """
    if name not in INTRINSICS:
        raise ValueError(f"unknown intrinsic {name!r}; expected one of {INTRINSICS}")
    if name == "pow":
        if exponent is None:
            raise ValueError("pow needs an exponent")
        exponent = float(exponent)
        if exponent.is_integer():
            if exponent >= 0:
                return _int_power(p, int(exponent))
            return _int_power(apply_intrinsic("recip", p), int(-exponent))
    if name == "sqrt":
        name, exponent = "pow", 0.5
        _check_domain("sqrt", p.coef[0], exponent)
    else:
        _check_domain(name, p.coef[0], exponent)

    a0 = p.coef[0]
    terms = _series(name, a0, p.ctx.order, exponent)
    coef = np.array(p.coef)
    coef[0] = 0.0
    u = TruncatedPoly._wrap(p.ctx, coef)
    # Horner in the nilpotent part
    result = p.ctx.constant(terms[-1])
    for c in reversed(terms[:-1]):
        result = add(mul(result, u), p.ctx.constant(c))
    return result


def _int_power(p: TruncatedPoly, k: int) -> TruncatedPoly:
    result = p.ctx.constant(np.ones(p.batch_shape))
    base = p
    while k:
        if k & 1:
            result = mul(result, base)
        k >>= 1
        if k:
            base = mul(base, base)
    return result


def sqrt(x):
    return apply_intrinsic("sqrt", x) if isinstance(x, TruncatedPoly) else np.sqrt(x)


def exp(x):
    return apply_intrinsic("exp", x) if isinstance(x, TruncatedPoly) else np.exp(x)


def log(x):
    return apply_intrinsic("log", x) if isinstance(x, TruncatedPoly) else np.log(x)


def sin(x):
    return apply_intrinsic("sin", x) if isinstance(x, TruncatedPoly) else np.sin(x)


def cos(x):
    return apply_intrinsic("cos", x) if isinstance(x, TruncatedPoly) else np.cos(x)


def recip(x):
    return apply_intrinsic("recip", x) if isinstance(x, TruncatedPoly) else 1.0 / np.asarray(x, dtype=float)


def power(x, exponent):
    if isinstance(x, TruncatedPoly):
        return apply_intrinsic("pow", x, exponent)
    return np.power(x, exponent)


# -- polynomial vectors and matrices -------------------------------------------


def constant_part(mat: list[list[TruncatedPoly]]) -> np.ndarray:
    """Constant coefficients of a polynomial matrix as an array ``(*batch, rows, cols)``."""
    rows = [np.broadcast_arrays(*[p.coef[0] for p in row]) for row in mat]
    rows = np.broadcast_arrays(*[np.stack(r, axis=-1) for r in rows])
    return np.stack(rows, axis=-2)


def constant_matrix(ctx: DAContext, values) -> list[list[TruncatedPoly]]:
    values = np.asarray(values, dtype=float)
    return [[ctx.constant(values[..., i, j]) for j in range(values.shape[-1])] for i in range(values.shape[-2])]


def polymat_mul(a: list[list[TruncatedPoly]], b: list[list[TruncatedPoly]]) -> list[list[TruncatedPoly]]:
    if len(a[0]) != len(b):
        raise ValueError("inner dimensions do not match")
    out = []
    for row in a:
        out_row = []
        for j in range(len(b[0])):
            acc = mul(row[0], b[0][j])
            for k in range(1, len(b)):
                acc = add(acc, mul(row[k], b[k][j]))
            out_row.append(acc)
        out.append(out_row)
    return out


def polymat_vec(a: list[list[TruncatedPoly]], v: list[TruncatedPoly]) -> list[TruncatedPoly]:
    return [col[0] for col in polymat_mul(a, [[p] for p in v])]


def polymat_add(a, b):
    return [[add(p, q) for p, q in zip(ra, rb)] for ra, rb in zip(a, b)]


def transpose(mat):
    return [list(col) for col in zip(*mat)]


def symmetrize(mat):
    return [[scale(add(mat[i][j], mat[j][i]), 0.5) for j in range(len(mat))] for i in range(len(mat))]


def polymat_inverse(mat: list[list[TruncatedPoly]]) -> list[list[TruncatedPoly]]:
    """Inverse of a square polynomial matrix in the truncated algebra.

    With ``M = M0 + N`` (``M0`` the constant part, ``N`` nilpotent)
    ``M^-1 = sum_{k=0..order} (-M0^-1 N)^k M0^-1``, which is exact because
    ``N^(order+1)`` vanishes.  Raises :class:`SingularMatrixError` (with a
    batch mask) where ``M0`` is singular or has condition number >= 1e12.
    """
    n = len(mat)
    if any(len(row) != n for row in mat):
        raise ValueError("polymat_inverse needs a square matrix")
    ctx = _common_ctx(p for row in mat for p in row)
    m0 = constant_part(mat)
    finite = np.all(np.isfinite(m0), axis=(-2, -1))
    cond = np.full(finite.shape, np.inf)
    with np.errstate(all="ignore"):
        cond[finite] = np.linalg.cond(m0[finite])
    bad = ~np.isfinite(cond) | (cond >= MAX_CONDITION)
    if np.any(bad):
        raise SingularMatrixError("constant part of polynomial matrix is singular or ill-conditioned", mask=bad)
    m0_inv = np.linalg.inv(m0)

    # K = -M0^-1 (M - M0), built with coefficient scaling by the constant inverse
    nil = [[add(mat[i][j], ctx.constant(-m0[..., i, j])) for j in range(n)] for i in range(n)]
    k_mat = []
    for i in range(n):
        row = []
        for j in range(n):
            acc = scale(nil[0][j], -m0_inv[..., i, 0])
            for k in range(1, n):
                acc = add(acc, scale(nil[k][j], -m0_inv[..., i, k]))
            row.append(acc)
        k_mat.append(row)

    term = constant_matrix(ctx, m0_inv)
    result = term
    for _ in range(ctx.order):
        term = polymat_mul(k_mat, term)
        result = polymat_add(result, term)
    return result
