"""Conjugate Normal-Gamma state-space filtering and backward sampling.

The model observed at times t = 1..T is

    y_t     = F_t theta_t + e_t,        e_t ~ N(0, v_t V)
    theta_t = G_t theta_{t-1} + w_t,    w_t ~ N(0, v_t W)
    1/v_t   = (gamma_t / omega) / v_{t-1},  gamma_t ~ Beta(omega n_{t-1}, (1-omega) n_{t-1})

with conjugate Normal-Gamma prior NG(m0, M0, n0, d0) on (theta_0, 1/v_0).
The discount omega in (0, 1] controls stochastic decay of the precision;
omega = 1 is a static variance model. Filtering stays within the
Normal-Gamma family; the backward pass draws the full trajectory
(theta_{0:T}, v_{0:T}) for use as a blocked Gibbs step.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.special import gammaln

from ._linalg import cho_solve, psd_sqrt, sym, tri_solve
from .errors import NumericError, ValidationError

__all__ = [
    "SsmSpec",
    "FilterState",
    "StateDraw",
    "kalman_filter",
    "backward_sample",
    "ffbs",
    "beta_shock",
    "draw_shifted_gamma_precision",
]


def _per_time(x, t: int):
    """Resolve a per-time matrix given as a list, a single array, or a callable."""
    if callable(x):
        return np.asarray(x(t), dtype=float)
    if isinstance(x, (list, tuple)):
        return np.asarray(x[t - 1], dtype=float)
    return np.asarray(x, dtype=float)


@dataclass
class SsmSpec:
    """Model matrices and prior for one state-space model.

    ``f`` and ``g`` may each be a single array (time-invariant), a list
    with one entry per time 1..T, or a callable of t. ``g=None`` means
    the identity transition. ``w`` is the state innovation correlation
    (scaled by v_t); ``v`` the observation correlation.
    """

    f: object = None
    g: object = None
    v: np.ndarray = None
    w: np.ndarray = None
    omega: float = 0.95
    m0: np.ndarray = None
    M0: np.ndarray = None
    n0: float = 1.0
    d0: float = 1.0

    def __post_init__(self):
        if not (0.0 < self.omega <= 1.0):
            raise ValidationError(f"omega must lie in (0, 1], got {self.omega}")
        if self.n0 <= 0.0 or self.d0 <= 0.0:
            raise ValidationError("n0 and d0 must be positive")
        self.v = np.atleast_2d(np.asarray(self.v, dtype=float))
        self.w = np.atleast_2d(np.asarray(self.w, dtype=float))
        self.m0 = np.atleast_1d(np.asarray(self.m0, dtype=float))
        self.M0 = np.atleast_2d(np.asarray(self.M0, dtype=float))
        p = self.m0.shape[0]
        if self.M0.shape != (p, p) or self.w.shape != (p, p):
            raise ValidationError("m0, M0, and w dimensions are inconsistent")

    def f_at(self, t: int) -> np.ndarray:
        if self.f is None:
            raise ValidationError("spec has no observation matrices")
        out = _per_time(self.f, t)
        return out if out.ndim == 2 else out[None, :]

    def g_at(self, t: int) -> np.ndarray | None:
        if self.g is None:
            return None
        return _per_time(self.g, t)


@dataclass
class FilterState:
    """Per-time filtering quantities, index 0 holding the prior.

    ``a``/``A`` are the state prior moments, ``q``/``Q`` the one-step
    forecast moments (entries at index 0 unused), ``m``/``M`` the
    filtered moments, and (n, d) the Gamma hyperparameters with their
    discounted versions (n_star, d_star). ``forecast_logpdf`` holds the
    per-step log density of y_t under the Student-t one-step forecast.
    """

    a: np.ndarray
    A: np.ndarray
    q: np.ndarray
    Q: np.ndarray
    m: np.ndarray
    M: np.ndarray
    n: np.ndarray
    d: np.ndarray
    n_star: np.ndarray
    d_star: np.ndarray
    forecast_logpdf: np.ndarray

    @property
    def n_times(self) -> int:
        return self.m.shape[0] - 1


@dataclass
class StateDraw:
    """One joint draw of the latent trajectory and variances."""

    theta: np.ndarray
    v: np.ndarray

    def __post_init__(self):
        if np.any(self.v <= 0.0):
            raise NumericError("drawn variances must be positive")


def beta_shock(n: float, omega: float, rng: np.random.Generator, size=None) -> np.ndarray:
    """Multiplicative precision shock gamma_t / omega.

    gamma_t ~ Beta(omega n, (1-omega) n); the shock has unit mean. With
    omega = 1 the Beta degenerates at one and the shock is exactly one.
    """
    if not (0.0 < omega <= 1.0):
        raise ValidationError(f"omega must lie in (0, 1], got {omega}")
    if omega == 1.0:
        return np.ones(size) if size is not None else 1.0
    return rng.beta(omega * n, (1.0 - omega) * n, size=size) / omega


def draw_shifted_gamma_precision(
    shape: float, rate: float, shift: float, rng: np.random.Generator, size=None
) -> np.ndarray:
    """Draw from Shifted-Gamma(shape, rate, shift).

    The backward conditional of a precision given its successor: a Gamma
    variate plus the discounted successor precision. A nonpositive shape
    (omega = 1) is the analytic point mass at the shift.
    """
    if shape <= 0.0:
        return np.full(size, shift) if size is not None else shift
    return shift + rng.gamma(shape, 1.0 / rate, size=size)


def kalman_filter(y: np.ndarray, spec: SsmSpec) -> FilterState:
    """Forward filtering pass.

    Runs the conjugate recursion over t = 1..T and returns the complete
    filtering state. Raises ``NumericError`` citing the failing time
    index if a forecast covariance cannot be factorized.
    """
    y = np.asarray(y, dtype=float)
    if y.ndim == 1:
        y = y[:, None]
    n_times = y.shape[0]
    n_obs = y.shape[1]
    p = spec.m0.shape[0]
    omega = spec.omega

    a = np.zeros((n_times + 1, p))
    A = np.zeros((n_times + 1, p, p))
    q = np.zeros((n_times + 1, n_obs))
    Q = np.zeros((n_times + 1, n_obs, n_obs))
    m = np.zeros((n_times + 1, p))
    M = np.zeros((n_times + 1, p, p))
    n = np.zeros(n_times + 1)
    d = np.zeros(n_times + 1)
    n_star = np.zeros(n_times + 1)
    d_star = np.zeros(n_times + 1)
    fc = np.zeros(n_times + 1)

    m[0], M[0], n[0], d[0] = spec.m0, spec.M0, spec.n0, spec.d0
    a[0], A[0] = spec.m0, spec.M0
    n_star[0], d_star[0] = spec.n0, spec.d0

    for t in range(1, n_times + 1):
        g = spec.g_at(t)
        if g is None:
            a[t] = m[t - 1]
            A[t] = M[t - 1] + spec.w
        else:
            a[t] = g @ m[t - 1]
            A[t] = g @ M[t - 1] @ g.T + spec.w
        A[t] = sym(A[t])
        n_star[t] = omega * n[t - 1]
        d_star[t] = omega * d[t - 1]

        f = spec.f_at(t)
        q[t] = f @ a[t]
        fa = f @ A[t]
        Q[t] = sym(fa @ f.T + spec.v)
        try:
            lq = np.linalg.cholesky(Q[t])
        except np.linalg.LinAlgError as exc:
            raise NumericError(f"singular forecast covariance at time {t}") from exc

        err = y[t - 1] - q[t]
        z = tri_solve(lq, err)
        qf = float(z @ z)
        gain = tri_solve(lq, fa)
        m[t] = a[t] + gain.T @ z
        M[t] = sym(A[t] - gain.T @ gain)
        n[t] = n_star[t] + 0.5 * n_obs
        d[t] = d_star[t] + 0.5 * qf

        dof = 2.0 * n_star[t]
        logdet_sigma = n_obs * np.log(d_star[t] / n_star[t]) + 2.0 * np.sum(
            np.log(np.diag(lq))
        )
        qf_sigma = qf * n_star[t] / d_star[t]
        fc[t] = (
            gammaln(0.5 * (dof + n_obs))
            - gammaln(0.5 * dof)
            - 0.5 * n_obs * np.log(dof * np.pi)
            - 0.5 * logdet_sigma
            - 0.5 * (dof + n_obs) * np.log1p(qf_sigma / dof)
        )

    return FilterState(a, A, q, Q, m, M, n, d, n_star, d_star, fc)


def _backward_gain(fs: FilterState, g, t: int) -> np.ndarray:
    """Smoothing gain M_t G' A_{t+1}^{-1} with a pseudo-inverse fallback."""
    gm = fs.M[t] if g is None else g @ fs.M[t]
    try:
        la = np.linalg.cholesky(fs.A[t + 1])
        return cho_solve(la, gm).T
    except np.linalg.LinAlgError:
        return (np.linalg.pinv(fs.A[t + 1], hermitian=True) @ gm).T


def backward_sample(
    fs: FilterState,
    spec: SsmSpec,
    rng: np.random.Generator,
    smoother: str = "conditional",
) -> StateDraw:
    """Backward sampling pass.

    Draws v_T^{-1} ~ Gamma(n_T, d_T) and theta_T from its filtered
    Gaussian, then walks backward alternating the Shifted-Gamma
    precision draw with the state draw.

    ``smoother`` picks the state recursion. ``"conditional"`` (default)
    conditions each theta_t on the theta_{t+1} just drawn, producing a
    joint trajectory draw as required by a blocked Gibbs sampler.
    ``"literal"`` instead recurses on smoothed means s_t with variance
    recursion S_t = M_t - J (A_{t+1} - S_{t+1}) J', which yields
    per-time marginal draws around the smoothed path.
    """
    if smoother not in ("conditional", "literal"):
        raise ValidationError(f"unknown smoother {smoother!r}")
    if not np.all(np.isfinite(fs.m)) or not np.all(np.isfinite(fs.M)):
        raise NumericError("filter moments are not finite")
    n_times = fs.n_times
    p = fs.m.shape[1]
    omega = spec.omega

    theta = np.zeros((n_times + 1, p))
    v = np.zeros(n_times + 1)

    prec = rng.gamma(fs.n[n_times], 1.0 / fs.d[n_times])
    v[n_times] = 1.0 / prec
    theta[n_times] = fs.m[n_times] + np.sqrt(v[n_times]) * (
        psd_sqrt(fs.M[n_times]) @ rng.standard_normal(p)
    )

    s_mean = fs.m[n_times]
    s_cov = fs.M[n_times]

    for t in range(n_times - 1, -1, -1):
        shape = (1.0 - omega) * fs.n[t]
        v_extra = draw_shifted_gamma_precision(shape, fs.d[t], omega / v[t + 1], rng)
        v[t] = 1.0 / v_extra

        g = spec.g_at(t + 1)
        gain = _backward_gain(fs, g, t)
        gm = fs.M[t] if g is None else g @ fs.M[t]
        if smoother == "conditional":
            mean = fs.m[t] + gain @ (theta[t + 1] - fs.a[t + 1])
            cov = sym(fs.M[t] - gain @ gm)
        else:
            s_mean = fs.m[t] + gain @ (s_mean - fs.a[t + 1])
            s_cov = sym(fs.M[t] - gain @ (fs.A[t + 1] - s_cov) @ gain.T)
            mean, cov = s_mean, s_cov
        theta[t] = mean + np.sqrt(v[t]) * (psd_sqrt(cov) @ rng.standard_normal(p))

    return StateDraw(theta=theta, v=v)


def ffbs(
    y: np.ndarray,
    spec: SsmSpec,
    rng: np.random.Generator,
    smoother: str = "conditional",
) -> StateDraw:
    """One forward-filter-backward-sample draw of (theta_{0:T}, v_{0:T})."""
    return backward_sample(kalman_filter(y, spec), spec, rng, smoother=smoother)
