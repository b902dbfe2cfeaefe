"""Exception types shared across the package."""

from __future__ import annotations

import numpy as np


class TaylorFlowError(Exception):
    """Base class for all package errors."""


class ContextMismatchError(TaylorFlowError, ValueError):
    """Polynomials from different algebra contexts were combined."""


class BatchedFailure(TaylorFlowError):
    """A failure that may affect only some members of a batch.

    ``mask`` is a boolean array over the batch shape marking the failing
    members, or ``None`` when the whole computation failed.
    """

    def __init__(self, message: str, mask: np.ndarray | None = None):
        super().__init__(message)
        self.mask = None if mask is None else np.asarray(mask, dtype=bool)


class DomainError(BatchedFailure, ValueError):
    """An intrinsic was applied outside its domain at the expansion center."""


class SingularMatrixError(BatchedFailure, np.linalg.LinAlgError):
    """A matrix that must be inverted is singular, ill-conditioned or not definite."""


class NotPSDError(TaylorFlowError, np.linalg.LinAlgError):
    """A matrix expected to be positive semidefinite has a materially negative eigenvalue."""


class ConfigError(TaylorFlowError, ValueError):
    """Invalid scenario, flow or run configuration."""


class NumericalFailure(TaylorFlowError, ArithmeticError):
    """A flow produced a non-finite state."""

    def __init__(self, message: str, particle: int | None = None, lam: float | None = None):
        super().__init__(message)
        self.particle = particle
        self.lam = lam
