"""Dense linear algebra and seeded Gaussian sampling used by the flows."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.linalg

from .errors import NotPSDError, SingularMatrixError

SYMMETRY_TOL = 1e-9
MAX_CONDITION = 1e12
NEGATIVE_EIG_TOL = 1e-8
# above the roundoff left in the null pivot of a rank-deficient Q, well below the reconstruction tolerance
PIVOT_TOL = 1e-10

# SeedSequence spawn-key prefixes keep prior sampling and flow noise independent
_STREAM_TAGS = {"prior": 0, "flow": 1}


def sym_matrix(a, tol: float = SYMMETRY_TOL) -> np.ndarray:
    """Validate near-symmetry of ``a`` (shape ``(..., n, n)``) and return ``(a + a.T) / 2``."""
    a = np.array(a, dtype=float)
    if a.ndim < 2 or a.shape[-1] != a.shape[-2]:
        raise ValueError(f"expected square matrix, got shape {a.shape}")
    at = np.swapaxes(a, -1, -2)
    scale = np.max(np.abs(a), axis=(-2, -1), keepdims=True)
    if np.any(np.abs(a - at) > tol * scale):
        raise ValueError("matrix is not symmetric")
    return 0.5 * (a + at)


def sym_inverse(a) -> np.ndarray:
    """Inverse of a symmetric positive definite matrix via Cholesky."""
    a = sym_matrix(a)
    try:
        factor = scipy.linalg.cho_factor(a)
    except np.linalg.LinAlgError as exc:
        raise SingularMatrixError(f"matrix is not positive definite: {exc}") from None
    cond = np.linalg.cond(a)
    if not np.isfinite(cond) or cond >= MAX_CONDITION:
        raise SingularMatrixError(f"matrix is ill-conditioned (cond={cond:.3g})")
    inv = scipy.linalg.cho_solve(factor, np.eye(len(a)))
    return 0.5 * (inv + inv.T)


def ldl_sqrt_batch(q) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Diagonally pivoted LDL^T square root of a stack of near-PSD matrices.

    Returns ``(B, clamps, not_psd)`` with ``B @ B.T ~= q`` for every matrix,
    ``clamps`` the number of pivots clamped to zero per matrix and ``not_psd``
    a mask of matrices with an eigenvalue below ``-1e-8 * max|q|`` (their
    ``B`` is still computed, with the negative pivots clamped).
    """
    q = sym_matrix(q)
    batch = q.shape[:-2]
    n = q.shape[-1]
    a = q.reshape(-1, n, n).copy()
    m = len(a)
    scale = np.max(np.abs(a), axis=(-2, -1))
    not_psd = np.zeros(m, dtype=bool)
    nonzero = scale > 0
    if nonzero.any():
        eig_min = np.linalg.eigvalsh(a[nonzero])[:, 0]
        not_psd[nonzero] = eig_min < -NEGATIVE_EIG_TOL * scale[nonzero]

    rows = np.arange(m)
    lower = np.zeros_like(a)
    d = np.zeros((m, n))
    perm = np.tile(np.arange(n), (m, 1))
    clamps = np.zeros(m, dtype=np.int64)
    for k in range(n):
        piv = k + np.argmax(np.diagonal(a, axis1=1, axis2=2)[:, k:], axis=1)
        for arr in (a, lower):
            tmp = arr[rows, k].copy()
            arr[rows, k] = arr[rows, piv]
            arr[rows, piv] = tmp
        tmp = a[rows, :, k].copy()
        a[rows, :, k] = a[rows, :, piv]
        a[rows, :, piv] = tmp
        tmp = perm[rows, k].copy()
        perm[rows, k] = perm[rows, piv]
        perm[rows, piv] = tmp

        dk = a[:, k, k]
        ok = dk > PIVOT_TOL * scale
        clamps += ~ok
        d[:, k] = np.where(ok, dk, 0.0)
        lower[:, k, k] = 1.0
        col = np.where(ok[:, None], a[:, k + 1:, k] / np.where(ok, dk, 1.0)[:, None], 0.0)
        lower[:, k + 1:, k] = col
        a[:, k + 1:, k + 1:] -= col[:, :, None] * col[:, None, :] * d[:, k, None, None]

    root = lower * np.sqrt(d)[:, None, :]
    inv_perm = np.argsort(perm, axis=1)
    b = np.take_along_axis(root, inv_perm[:, :, None], axis=1)
    return b.reshape(q.shape), clamps.reshape(batch), not_psd.reshape(batch)


def ldl_sqrt(q) -> tuple[np.ndarray, int | np.ndarray]:
    """Matrix square root ``B`` with ``B @ B.T = q`` for near-PSD ``q``.

    ``q = L T L^T`` (with symmetric diagonal pivoting) and ``B = L T^{1/2}``
    with its rows un-permuted.  Pivots below ``1e-10 * max|q|`` or negative
    are clamped to zero.  Raises :class:`NotPSDError` for a materially
    negative eigenvalue.  Returns ``(B, clamp_count)``.
    """
    b, clamps, not_psd = ldl_sqrt_batch(q)
    if np.any(not_psd):
        raise NotPSDError("matrix has a materially negative eigenvalue")
    return b, (int(clamps) if np.ndim(clamps) == 0 else clamps)


@dataclass(frozen=True)
class RngStream:
    """Counter-addressed normal stream for one (particle, step) pair.

    The draws depend only on ``(seed, tag, step, particle)``, never on the
    order in which particles or steps are visited.
    """

    seed: int
    particle: int
    step: int
    tag: str = "flow"

    def normal(self, dim: int) -> np.ndarray:
        return stream_block(self.seed, self.step, self.particle + 1, dim, self.tag)[self.particle]


def stream_block(seed: int, step: int, count: int, dim: int, tag: str = "flow") -> np.ndarray:
    """Standard normals for particles ``0..count-1`` at ``step``, shape ``(count, dim)``.

    Row ``i`` is the draw of ``RngStream(seed, i, step, tag)`` and does not
    depend on ``count``.
    """
    if tag not in _STREAM_TAGS:
        raise ValueError(f"unknown stream tag {tag!r}")
    ss = np.random.SeedSequence(int(seed), spawn_key=(_STREAM_TAGS[tag], int(step)))
    return np.random.Generator(np.random.PCG64(ss)).standard_normal((count, dim))


def gaussian_draw(rng: RngStream, mean, cov) -> np.ndarray:
    mean = np.asarray(mean, dtype=float)
    b, _ = ldl_sqrt(cov)
    return mean + b @ rng.normal(len(mean))
