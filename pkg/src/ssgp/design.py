"""Space-filling experimental design and predictive scoring.

Latin hypercube designs pick the simulator inputs for a training
ensemble; the scores compare held-out field observations against
posterior predictive replicates (mean and SD per space-time cell).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ValidationError

__all__ = ["DesignSet", "ScoreReport", "latin_hypercube", "grs", "rmse"]


@dataclass(frozen=True)
class DesignSet:
    """An N x d design on the unit cube with optional raw-scale bounds.

    Each column stratifies [0, 1] into N equal cells and places exactly
    one point in each, so low-dimensional projections stay space-filling.
    """

    u: np.ndarray
    bounds: tuple[tuple[float, float], ...] | None = None
    seed: int | None = None

    def __post_init__(self):
        u = np.asarray(self.u, dtype=float)
        if u.ndim != 2:
            raise ValidationError("design must be a 2-D array")
        if np.any(u < 0.0) or np.any(u > 1.0):
            raise ValidationError("design points must lie in [0, 1]")
        n = u.shape[0]
        strata = np.sort(np.clip((u * n).astype(int), 0, n - 1), axis=0)
        if not np.array_equal(strata, np.tile(np.arange(n)[:, None], (1, u.shape[1]))):
            raise ValidationError("each design column must occupy every stratum once")
        object.__setattr__(self, "u", u)
        if self.bounds is not None:
            bounds = tuple((float(lo), float(hi)) for lo, hi in self.bounds)
            if len(bounds) != u.shape[1]:
                raise ValidationError("bounds length must match design dimension")
            if any(hi <= lo for lo, hi in bounds):
                raise ValidationError("each bound must satisfy lo < hi")
            object.__setattr__(self, "bounds", bounds)

    @property
    def n_points(self) -> int:
        return self.u.shape[0]

    @property
    def n_dims(self) -> int:
        return self.u.shape[1]

    def to_raw(self) -> np.ndarray:
        """Map unit-cube points to raw parameter scale via the bounds."""
        if self.bounds is None:
            raise ValidationError("design has no bounds to map to raw scale")
        lo = np.array([b[0] for b in self.bounds])
        hi = np.array([b[1] for b in self.bounds])
        return lo + self.u * (hi - lo)


def latin_hypercube(
    n_points: int,
    n_dims: int,
    seed,
    bounds=None,
    midpoint: bool = False,
) -> DesignSet:
    """Jittered Latin hypercube design, deterministic given the seed.

    Column c is (pi_c(0..N-1) + u) / N for an independent permutation
    pi_c and jitter u ~ Uniform(0, 1) per point; ``midpoint=True`` pins
    u = 1/2 for a reproducible centered variant.
    """
    if n_points < 1 or n_dims < 1:
        raise ValidationError("latin_hypercube needs n_points >= 1 and n_dims >= 1")
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    perms = np.column_stack([rng.permutation(n_points) for _ in range(n_dims)])
    if midpoint:
        jitter = np.full((n_points, n_dims), 0.5)
    else:
        jitter = rng.uniform(size=(n_points, n_dims))
    u = (perms + jitter) / n_points
    stored_seed = seed if isinstance(seed, (int, np.integer)) else None
    return DesignSet(u=u, bounds=bounds, seed=stored_seed)


@dataclass(frozen=True)
class ScoreReport:
    """One row of a score table: a model variant against held-out data."""

    model: str
    grs: float
    rmse: float
    n_model_runs: int

    def __post_init__(self):
        if self.rmse < 0.0:
            raise ValidationError("rmse must be nonnegative")


def _aligned(z, other, name):
    z = np.asarray(z, dtype=float)
    other = np.asarray(other, dtype=float)
    if z.shape != other.shape:
        raise ValidationError(f"{name} shape {other.shape} does not match data {z.shape}")
    return z, other


def grs(z, mu_rep, sigma_rep) -> float:
    """Gaussian replicate score; higher is better.

    Sums ``-((z - mu)/sigma)^2 - 2 log sigma`` over every space-time
    cell, rewarding predictive means near the data at honestly small
    spread. Per cell the score is maximized at sigma = |z - mu|.
    """
    z, mu_rep = _aligned(z, mu_rep, "mu_rep")
    z, sigma_rep = _aligned(z, sigma_rep, "sigma_rep")
    if np.any(sigma_rep <= 0.0):
        raise ValidationError("sigma_rep must be positive everywhere")
    resid = (z - mu_rep) / sigma_rep
    return float(-np.sum(resid**2) - 2.0 * np.sum(np.log(sigma_rep)))


def rmse(z, predictions) -> float:
    """Root mean squared error against the posterior predictive mean."""
    z, predictions = _aligned(z, predictions, "predictions")
    return float(np.sqrt(np.mean((z - predictions) ** 2)))
