"""Correlation kernels over simulator-input space and physical space.

This module provides the squared-exponential correlation family used
throughout the package, the correlation map for covariance matrices,
Kronecker-structured cross-correlations over a set of spatial locations,
and low-rank predictive-process correlations anchored at a knot set.

All builders return correlation matrices with exact unit diagonals; the
diagonal jitter of ``_linalg.EPS_JITTER`` is applied at factorization
time, not at construction.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from ._linalg import (
    EPS_JITTER,
    chol_lower,
    chol_lower_exact,
    cho_solve,
    logdet_from_chol,
    sym,
    tri_solve,
)
from .errors import ValidationError

__all__ = [
    "RangeParams",
    "CrossCovT",
    "KnotSet",
    "KroneckerCorr",
    "sq_exp_corr",
    "corr_matrix",
    "corr_from_cov",
    "kron_corr",
    "predictive_process_corr",
    "predictive_process_spatial_factor",
    "adjacency_corr",
]


def _as_points(x) -> np.ndarray:
    """Coerce a point set to a 2-D float array of shape (n, dim)."""
    arr = np.atleast_1d(np.asarray(x, dtype=float))
    if arr.ndim == 1:
        arr = arr[:, None]
    if arr.ndim != 2:
        raise ValidationError(f"expected points of shape (n, dim), got {arr.shape}")
    return arr


def _check_ranges(beta, dim: int) -> np.ndarray:
    beta = np.atleast_1d(np.asarray(beta, dtype=float))
    if beta.shape != (dim,):
        raise ValidationError(
            f"range parameter has length {beta.shape[0]}, expected {dim}"
        )
    if not np.all(np.isfinite(beta)) or np.any(beta <= 0.0):
        raise ValidationError("range parameters must be strictly positive and finite")
    return beta


@dataclass
class RangeParams:
    """Decay-rate vectors for the three squared-exponential kernels.

    Parameters
    ----------
    beta : array-like
        Input-space decay rates, one per simulator-input dimension.
    omega_sp : array-like
        Spatial decay rates, one per location-coordinate dimension.
    rho : array-like
        Bias-process decay rates, one per location-coordinate dimension.
    """

    beta: np.ndarray
    omega_sp: np.ndarray
    rho: np.ndarray

    def __post_init__(self):
        for name in ("beta", "omega_sp", "rho"):
            val = np.atleast_1d(np.asarray(getattr(self, name), dtype=float))
            if not np.all(np.isfinite(val)) or np.any(val <= 0.0):
                raise ValidationError(f"{name} must be strictly positive and finite")
            setattr(self, name, val)


@dataclass
class CrossCovT:
    """Cross-covariance of the latent state components with its prior.

    ``t_mat`` is the p x p positive-definite covariance coupling the p
    state components at a single location; ``prior_dof`` and
    ``prior_scale`` parameterize its Wishart-type update.
    """

    t_mat: np.ndarray
    prior_dof: float = 0.0
    prior_scale: np.ndarray | None = None

    def __post_init__(self):
        self.t_mat = np.atleast_2d(np.asarray(self.t_mat, dtype=float))
        p = self.t_mat.shape[0]
        if self.t_mat.shape != (p, p) or not np.allclose(self.t_mat, self.t_mat.T):
            raise ValidationError("t_mat must be square and symmetric")
        if np.any(np.linalg.eigvalsh(self.t_mat) <= 0.0):
            raise ValidationError("t_mat must be positive definite")
        if self.prior_dof == 0.0:
            self.prior_dof = p + 2.0
        if self.prior_scale is None:
            self.prior_scale = np.eye(p)


@dataclass
class KnotSet:
    """A reduced set of spatial sites anchoring a low-rank process.

    Parameters
    ----------
    knots : array-like, shape (n_knots, dim)
        Knot coordinates; must be distinct.
    placement : str
        Provenance tag, ``"grid"`` or ``"random"``.
    """

    knots: np.ndarray
    placement: str = "grid"

    def __post_init__(self):
        self.knots = _as_points(self.knots)
        if self.knots.shape[0] < 1:
            raise ValidationError("knot set must contain at least one site")
        diffs = self.knots[:, None, :] - self.knots[None, :, :]
        dist2 = np.sum(diffs**2, axis=-1)
        np.fill_diagonal(dist2, np.inf)
        if np.any(dist2 == 0.0):
            raise ValidationError("knots must be distinct")

    def __len__(self) -> int:
        return self.knots.shape[0]

    @classmethod
    def grid(cls, locations, n_per_side: int) -> "KnotSet":
        """Evenly spaced sub-grid of the bounding box of ``locations``."""
        pts = _as_points(locations)
        lo, hi = pts.min(axis=0), pts.max(axis=0)
        axes = [np.linspace(lo[k], hi[k], n_per_side) for k in range(pts.shape[1])]
        mesh = np.meshgrid(*axes, indexing="ij")
        knots = np.column_stack([m.ravel() for m in mesh])
        return cls(knots=knots, placement="grid")

    @classmethod
    def random(cls, locations, n_knots: int, rng: np.random.Generator) -> "KnotSet":
        """Random subset of ``locations`` without replacement."""
        pts = _as_points(locations)
        idx = rng.choice(pts.shape[0], size=n_knots, replace=False)
        return cls(knots=pts[idx], placement="random")


def sq_exp_corr(x, x_prime, beta) -> float:
    """Squared-exponential correlation between two points.

    Evaluates ``exp(-sum_i beta_i * (x_i - x'_i)**2)``; symmetric in its
    point arguments and equal to one at zero distance.
    """
    x = np.atleast_1d(np.asarray(x, dtype=float))
    xp = np.atleast_1d(np.asarray(x_prime, dtype=float))
    if x.shape != xp.shape:
        raise ValidationError(f"point shapes differ: {x.shape} vs {xp.shape}")
    beta = _check_ranges(beta, x.shape[0])
    return float(np.exp(-np.sum(beta * (x - xp) ** 2)))


def corr_matrix(x, beta, x2=None) -> np.ndarray:
    """Squared-exponential correlation matrix over a point set.

    Parameters
    ----------
    x : array-like, shape (n, dim)
        Point set; 1-D input is treated as n scalar points.
    beta : array-like, shape (dim,)
        Per-dimension decay rates.
    x2 : array-like, shape (m, dim), optional
        Second point set. When given, the rectangular n x m
        cross-correlation matrix is returned.

    Returns
    -------
    ndarray
        Symmetric PSD matrix with unit diagonal, or the rectangular
        cross-correlation when ``x2`` is given.
    """
    pts = _as_points(x)
    beta = _check_ranges(beta, pts.shape[1])
    other = pts if x2 is None else _as_points(x2)
    if other.shape[1] != pts.shape[1]:
        raise ValidationError(
            f"point dimensions differ: {pts.shape[1]} vs {other.shape[1]}"
        )
    d2 = (pts[:, None, :] - other[None, :, :]) ** 2
    out = np.exp(-np.tensordot(d2, beta, axes=([2], [0])))
    if x2 is None:
        out = sym(out)
        np.fill_diagonal(out, 1.0)
    return out


def corr_from_cov(t_mat) -> np.ndarray:
    """Correlation matrix of a covariance matrix.

    Maps ``T`` to ``h(T)`` with entries ``T_ij / sqrt(T_ii * T_jj)``.
    Idempotent and invariant to positive rescaling of ``T``.
    """
    t = np.atleast_2d(np.asarray(t_mat, dtype=float))
    diag = np.diag(t)
    if np.any(diag <= 0.0):
        raise ValidationError("covariance has a nonpositive diagonal entry")
    scale = 1.0 / np.sqrt(diag)
    out = sym(t * scale[:, None] * scale[None, :])
    np.fill_diagonal(out, 1.0)
    return out


class KroneckerCorr:
    """Kronecker-factored correlation ``W = H (x) T`` over S locations.

    The S x S spatial factor ``H`` and the p x p component factor ``T``
    are stored without materializing the pS x pS product. Log-determinant
    and solves use the factored identities ``log|W| = p log|H| + S log|T|``
    and ``W^{-1} = H^{-1} (x) T^{-1}``. Factorizations are computed once
    per instance, so reusing an instance across repeated density
    evaluations caches them per hyperparameter value.

    The factors are factorized exactly so the identities hold to
    near machine precision; callers that need conditioning protection
    add jitter to the factor diagonals before construction.

    Vectors interleave as location-major blocks: entry ``(j, a)`` of the
    state lives at flat index ``j * p + a``.
    """

    def __init__(self, h_mat: np.ndarray, t_mat: np.ndarray):
        self.h_mat = np.atleast_2d(np.asarray(h_mat, dtype=float))
        self.t_mat = np.atleast_2d(np.asarray(t_mat, dtype=float))
        self.n_locations = self.h_mat.shape[0]
        self.n_components = self.t_mat.shape[0]
        self._h_chol = chol_lower_exact(self.h_mat)
        self._t_chol = chol_lower_exact(self.t_mat)

    @property
    def shape(self) -> tuple[int, int]:
        n = self.n_locations * self.n_components
        return (n, n)

    @property
    def log_det(self) -> float:
        return self.n_components * logdet_from_chol(
            self._h_chol
        ) + self.n_locations * logdet_from_chol(self._t_chol)

    def _matricize(self, u: np.ndarray) -> np.ndarray:
        u = np.asarray(u, dtype=float)
        return u.reshape(u.shape[:-1] + (self.n_locations, self.n_components))

    def solve(self, u: np.ndarray) -> np.ndarray:
        """Apply ``W^{-1}`` to one or a stack of flat vectors."""
        mat = self._matricize(u)
        flat = mat.reshape(-1, self.n_components)
        right = cho_solve(self._t_chol, flat.T).T.reshape(mat.shape)
        left = cho_solve(self._h_chol, np.moveaxis(right, -2, 0).reshape(self.n_locations, -1))
        out = np.moveaxis(left.reshape((self.n_locations,) + mat.shape[:-2] + (self.n_components,)), 0, -2)
        return out.reshape(u.shape)

    def quad_form(self, u: np.ndarray) -> np.ndarray:
        """Quadratic form ``u' W^{-1} u`` for one or a stack of vectors."""
        u = np.asarray(u, dtype=float)
        return np.sum(u * self.solve(u), axis=-1)

    def dense(self) -> np.ndarray:
        """Materialize the full Kronecker product (small cases only)."""
        return np.kron(self.h_mat, self.t_mat)


def kron_corr(locations, omega_sp, t_mat) -> KroneckerCorr:
    """Build the Kronecker cross-correlation over a location set.

    ``H`` holds squared-exponential correlations between locations with
    decay rates ``omega_sp``; ``T`` couples the state components at a
    single location.
    """
    h = corr_matrix(locations, omega_sp)
    return KroneckerCorr(h, t_mat)


def predictive_process_corr(knots: KnotSet, s, s_prime, omega_sp, t_mat) -> np.ndarray:
    """Low-rank cross-correlation block between two locations.

    Returns the p x p block ``k(s)' K*^{-1} k(s')`` obtained by kriging
    from the knot correlations. When ``s == s_prime`` the diagonal bias
    correction is added: the difference between the exact kernel block
    and the kriged block, retained as its diagonal, which restores an
    exact unit-scale variance at every site.
    """
    t_mat = np.atleast_2d(np.asarray(t_mat, dtype=float))
    s = np.atleast_1d(np.asarray(s, dtype=float))
    sp = np.atleast_1d(np.asarray(s_prime, dtype=float))
    hstar = corr_matrix(knots.knots, omega_sp)
    lstar = chol_lower_exact(hstar)
    c_s = corr_matrix(knots.knots, omega_sp, x2=s[None, :])[:, 0]
    c_sp = corr_matrix(knots.knots, omega_sp, x2=sp[None, :])[:, 0]
    a = tri_solve(lstar, c_s)
    b = tri_solve(lstar, c_sp)
    block = float(a @ b) * t_mat
    if np.array_equal(s, sp):
        delta = np.clip((1.0 - float(a @ a)) * np.diag(t_mat), 0.0, None)
        block = block + np.diag(delta)
    return block


def predictive_process_spatial_factor(knots: KnotSet, locations, omega_sp) -> np.ndarray:
    """S x S spatial factor of the low-rank process at a location set.

    Computes the kriged correlation ``C H*^{-1} C'`` plus the diagonal
    correction that restores an exact unit diagonal. With knots equal to
    the locations this reproduces the full spatial correlation.
    """
    pts = _as_points(locations)
    hstar = corr_matrix(knots.knots, omega_sp)
    lstar = chol_lower_exact(hstar)
    c = corr_matrix(knots.knots, omega_sp, x2=pts)
    half = tri_solve(lstar, c)
    kriged = sym(half.T @ half)
    correction = np.clip(1.0 - np.diag(kriged), 0.0, None)
    out = kriged + np.diag(correction)
    np.fill_diagonal(out, 1.0)
    return out


def adjacency_corr(adjacency) -> np.ndarray:
    """Spatial correlation derived from a graph adjacency matrix.

    Uses the degree-normalized adjacency plus the identity,
    ``H = I + sym(A) / max_degree``, which is PSD by Gershgorin bounds
    and keeps an exact unit diagonal.
    """
    a = np.atleast_2d(np.asarray(adjacency, dtype=float))
    n = a.shape[0]
    if a.shape != (n, n):
        raise ValidationError("adjacency must be square")
    if np.any(np.diag(a) != 0.0):
        raise ValidationError("adjacency must have a zero diagonal")
    a = sym(a)
    deg_max = a.sum(axis=1).max()
    if deg_max <= 0.0:
        return np.eye(n)
    out = np.eye(n) + a / deg_max
    return out
