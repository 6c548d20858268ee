"""Shared dense linear-algebra helpers.

Correlation matrices built from squared-exponential kernels can be
severely ill-conditioned, so a small diagonal jitter is added before
factorization throughout the package. ``EPS_JITTER`` is the single
package-wide value.
"""

from __future__ import annotations

import numpy as np
import scipy.linalg

from .errors import NumericError

EPS_JITTER = 1e-8


def sym(a: np.ndarray) -> np.ndarray:
    """Symmetrize a square (or stacked square) matrix."""
    return 0.5 * (a + np.swapaxes(a, -1, -2))


def chol_lower(a: np.ndarray, jitter: float = EPS_JITTER) -> np.ndarray:
    """Lower Cholesky factor of ``a + jitter * I``.

    Raises ``NumericError`` with condition diagnostics if the jittered
    matrix is still not positive definite.
    """
    a = np.asarray(a, dtype=float)
    n = a.shape[-1]
    if jitter:
        a = a + jitter * np.eye(n)
    try:
        return np.linalg.cholesky(a)
    except np.linalg.LinAlgError as exc:
        eigs = np.linalg.eigvalsh(sym(a))
        raise NumericError(
            "Cholesky factorization failed: eigenvalue range "
            f"[{eigs.min():.3e}, {eigs.max():.3e}] with jitter {jitter:.1e}"
        ) from exc


def chol_lower_exact(a: np.ndarray, max_jitter: float = EPS_JITTER) -> np.ndarray:
    """Lower Cholesky factor, trying an exact factorization first.

    Used where interpolation exactness matters (knot correlation
    matrices). Jitter is escalated only when the plain factorization
    fails, up to ``max_jitter``.
    """
    a = np.asarray(a, dtype=float)
    jitter = 0.0
    while True:
        try:
            if jitter:
                return np.linalg.cholesky(a + jitter * np.eye(a.shape[-1]))
            return np.linalg.cholesky(a)
        except np.linalg.LinAlgError:
            if jitter >= max_jitter:
                return chol_lower(a, jitter=max_jitter)  # raises with diagnostics
            jitter = max(jitter * 100.0, 1e-14)


def cho_solve(lower: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Solve ``A x = b`` given the lower Cholesky factor of ``A``."""
    return scipy.linalg.cho_solve((lower, True), b, check_finite=False)


def tri_solve(lower: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Solve ``L x = b`` for lower-triangular ``L``."""
    return scipy.linalg.solve_triangular(lower, b, lower=True, check_finite=False)


def inv_from_chol(lower: np.ndarray) -> np.ndarray:
    """Inverse of ``A`` given its lower Cholesky factor."""
    inv, info = scipy.linalg.lapack.dpotri(lower, lower=1)
    if info != 0:
        return cho_solve(lower, np.eye(lower.shape[-1]))
    return np.tril(inv) + np.tril(inv, -1).T


def logdet_from_chol(lower: np.ndarray) -> float:
    """Log-determinant of ``A`` given its lower Cholesky factor."""
    return 2.0 * float(np.sum(np.log(np.diagonal(lower, axis1=-2, axis2=-1)), axis=-1))


def psd_sqrt(a: np.ndarray) -> np.ndarray:
    """A matrix square root ``B`` with ``B @ B.T = a`` for PSD ``a``.

    Degenerate covariances arise legitimately in the backward sampler
    (zero innovation variance pins consecutive states together), so the
    Cholesky attempt falls back to an eigendecomposition with negative
    eigenvalues clipped to zero.
    """
    a = np.asarray(a, dtype=float)
    try:
        return np.linalg.cholesky(a)
    except np.linalg.LinAlgError:
        w, u = np.linalg.eigh(sym(a))
        w = np.clip(w, 0.0, None)
        return u * np.sqrt(w)
