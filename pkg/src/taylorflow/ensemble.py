"""Equal-weight particle ensembles."""

from __future__ import annotations

import csv
import io
import json
from dataclasses import dataclass

import numpy as np

from .models import GaussianPrior
from .numerics import ldl_sqrt, stream_block


@dataclass(frozen=True, eq=False)
class ParticleEnsemble:
    """``N x n`` array of particle states.  There are no weights: every particle counts equally."""

    states: np.ndarray

    def __post_init__(self):
        states = np.array(self.states, dtype=float)
        if states.ndim != 2 or len(states) < 1:
            raise ValueError(f"states must be an (N, n) array with N >= 1, got shape {states.shape}")
        if not np.all(np.isfinite(states)):
            raise ValueError("ensemble states must be finite")
        states.flags.writeable = False
        object.__setattr__(self, "states", states)

    def __len__(self):
        return len(self.states)

    @property
    def dim(self) -> int:
        return self.states.shape[1]

    def deviations(self, center) -> np.ndarray:
        return self.states - np.asarray(center, dtype=float)[None, :]

    def to_csv(self) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow([f"x{i}" for i in range(self.dim)])
        for row in self.states:
            writer.writerow([f"{v:.17g}" for v in row])
        return buf.getvalue()

    @classmethod
    def from_csv(cls, text: str) -> ParticleEnsemble:
        rows = list(csv.reader(io.StringIO(text)))
        return cls(np.array([[float(v) for v in row] for row in rows[1:]]))

    def to_json(self) -> str:
        return json.dumps({"states": self.states.tolist()})


def sample_prior(prior: GaussianPrior, n_particles: int, seed: int) -> ParticleEnsemble:
    """Draw ``n_particles`` independent states from the Gaussian prior.

    Particle ``i`` equals ``gaussian_draw(RngStream(seed, i, 0, "prior"), mean, cov)``.
    """
    if n_particles < 1:
        raise ValueError("need at least one particle")
    root, _ = ldl_sqrt(prior.cov)
    z = stream_block(seed, 0, n_particles, prior.dim, tag="prior")
    return ParticleEnsemble(prior.mean[None, :] + z @ root.T)


def ensemble_stats(ens: ParticleEnsemble) -> tuple[np.ndarray, np.ndarray]:
    """Sample mean and unbiased (N - 1) sample covariance."""
    if len(ens) < 2:
        raise ValueError("ensemble statistics need at least two particles")
    mean = ens.states.mean(axis=0)
    dev = ens.states - mean
    cov = dev.T @ dev / (len(ens) - 1)
    return mean, 0.5 * (cov + cov.T)
