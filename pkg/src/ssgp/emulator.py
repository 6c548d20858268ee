"""State-space Gaussian-process emulation of spatiotemporal simulators.

A training ensemble holds simulator output over times t, locations s,
and design inputs x. Per location the output follows an AR(p) state
equation whose coefficient vector theta_t(s) evolves as a random walk;
across the design the residual is a Gaussian process with
squared-exponential correlation V(beta) over inputs, and across space
the state innovations share a Kronecker covariance W = H x T (spatial
correlation H times cross-lag correlation T). A single scale chain v_t
multiplies every covariance and decays through a Beta discount.

``fit_emulator`` runs the blocked MCMC: random-walk Metropolis on the
spatial range parameters and on beta, an optional conjugate-style
refresh of T, and a forward-filter-backward-sample refresh of the full
latent trajectory. ``emulator_predict`` conditions the run-level GP on
a new input; ``interpolate_latent`` kriges the latent state to unseen
locations; ``fit_heterogeneous`` fits an independent scalar model per
location as a no-spatial-structure baseline.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np
import scipy.stats
from scipy.special import gammaln

from . import ssm
from ._linalg import chol_lower_exact, cho_solve, inv_from_chol, logdet_from_chol, sym, tri_solve
from .design import DesignSet
from .errors import NumericError, ValidationError
from .kernels import (
    KnotSet,
    KroneckerCorr,
    adjacency_corr,
    corr_from_cov,
    corr_matrix,
    predictive_process_spatial_factor,
)

__all__ = [
    "Standardizer",
    "TrainingEnsemble",
    "EmulatorConfig",
    "EmulatorDraws",
    "build_ar_design",
    "fit_emulator",
    "fit_heterogeneous",
    "emulator_predict",
    "interpolate_latent",
]

_LOG2PI = np.log(2.0 * np.pi)


# ---------------------------------------------------------------------------
# Data containers
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class Standardizer:
    """Per-location affine transform between raw and modeling scale.

    The location axis must be named explicitly when transforming, since
    array layouts differ between training data (time, location, run)
    and prediction output (draw, time, location).
    """

    mean: np.ndarray  # (S,)
    sd: np.ndarray    # (S,)

    @classmethod
    def fit(cls, y_raw: np.ndarray) -> "Standardizer":
        """Learn location-wise mean/SD from a (T, S, N) raw ensemble."""
        mean = y_raw.mean(axis=(0, 2))
        sd = y_raw.std(axis=(0, 2))
        sd = np.where(sd > 0.0, sd, 1.0)
        return cls(mean=mean, sd=sd)

    def _along(self, values: np.ndarray, arr: np.ndarray, axis: int):
        axis = axis % arr.ndim
        if arr.shape[axis] != self.mean.shape[0]:
            raise ValidationError(
                f"axis {axis} has length {arr.shape[axis]}, expected "
                f"{self.mean.shape[0]} locations"
            )
        shape = [1] * arr.ndim
        shape[axis] = -1
        return values.reshape(shape)

    def transform(self, y_raw: np.ndarray, axis: int = 1) -> np.ndarray:
        y_raw = np.asarray(y_raw, dtype=float)
        return (y_raw - self._along(self.mean, y_raw, axis)) / self._along(
            self.sd, y_raw, axis
        )

    def inverse_mean(self, y_std: np.ndarray, axis: int = -1) -> np.ndarray:
        y_std = np.asarray(y_std, dtype=float)
        return y_std * self._along(self.sd, y_std, axis) + self._along(
            self.mean, y_std, axis
        )

    def inverse_sd(self, sd_std: np.ndarray, axis: int = -1) -> np.ndarray:
        sd_std = np.asarray(sd_std, dtype=float)
        return sd_std * self._along(self.sd, sd_std, axis)


@dataclass
class TrainingEnsemble:
    """Simulator outputs on a (time, location, run) grid plus inputs.

    ``y`` is indexed (t = 1..T, location, run) and is expected on the
    modeling scale (use ``from_raw`` to standardize). ``design`` holds
    the unit-cube inputs, one row per run. Exactly one of ``locations``
    (coordinates) or ``adjacency`` (graph) describes space.
    """

    y: np.ndarray
    design: object
    locations: np.ndarray | None = None
    adjacency: np.ndarray | None = None
    p: int = 1
    standardizer: Standardizer | None = None

    def __post_init__(self):
        # C-contiguous copy so reductions over a location's block are
        # bit-reproducible regardless of how the caller sliced the array.
        self.y = np.ascontiguousarray(self.y, dtype=float)
        if self.y.ndim != 3:
            raise ValidationError("y must be (time, location, run)")
        if not np.all(np.isfinite(self.y)):
            raise ValidationError("training outputs contain missing values")
        if isinstance(self.design, DesignSet):
            self.inputs = self.design.u
        else:
            self.inputs = np.atleast_2d(np.asarray(self.design, dtype=float))
        if self.inputs.shape[0] != self.y.shape[2]:
            raise ValidationError("design rows must match the number of runs")
        if self.y.shape[2] < 2:
            raise ValidationError("need at least two training runs")
        if self.p < 1 or self.y.shape[0] <= self.p:
            raise ValidationError("need lag order p >= 1 and more times than lags")
        if (self.locations is None) == (self.adjacency is None):
            raise ValidationError("give exactly one of locations or adjacency")
        if self.locations is not None:
            self.locations = np.atleast_2d(np.asarray(self.locations, dtype=float))
            if self.locations.ndim == 2 and self.locations.shape[0] == 1 and self.y.shape[1] > 1:
                self.locations = self.locations.T
            if self.locations.shape[0] != self.y.shape[1]:
                raise ValidationError("locations must match the location axis of y")
        if self.adjacency is not None:
            self.adjacency = np.asarray(self.adjacency, dtype=float)
            if self.adjacency.shape != (self.y.shape[1],) * 2:
                raise ValidationError("adjacency must be S x S")

    @classmethod
    def from_raw(cls, y_raw, design, locations=None, adjacency=None, p=1) -> "TrainingEnsemble":
        """Standardize raw outputs per location and keep the transform."""
        y_raw = np.ascontiguousarray(y_raw, dtype=float)
        std = Standardizer.fit(y_raw)
        return cls(
            y=std.transform(y_raw), design=design, locations=locations,
            adjacency=adjacency, p=p, standardizer=std,
        )

    @property
    def n_times(self) -> int:
        return self.y.shape[0]

    @property
    def n_locations(self) -> int:
        return self.y.shape[1]

    @property
    def n_runs(self) -> int:
        return self.y.shape[2]

    @property
    def n_dims(self) -> int:
        return self.inputs.shape[1]

    @property
    def obs_times(self) -> np.ndarray:
        """1-based time indices with a full lag window, p+1 .. T."""
        return np.arange(self.p + 1, self.n_times + 1)


@dataclass
class EmulatorConfig:
    """Sampler settings for ``fit_emulator`` / ``fit_heterogeneous``.

    ``n_samples`` is the total number of MCMC iterations; every
    ``thin``-th draw after ``burn_in`` is retained. ``eps1``/``eps2``
    are the log-scale random-walk step sizes for the spatial ranges and
    for beta. ``mode`` is "spatial", "predictive_process" (requires
    ``knots``), or "heterogeneous". ``t_prior`` switches on the
    cross-lag covariance refresh (identity T when None). Both
    hyperparameter groups carry independent log-normal(0, prior_sd^2)
    priors.
    """

    omega: float = 0.95
    n_samples: int = 10000
    burn_in: int = 2000
    thin: int = 10
    eps1: float = 0.1
    eps2: float = 0.1
    mode: str = "spatial"
    knots: KnotSet | None = None
    t_prior: object = None
    prior_sd: float = 1.5
    n0: float = 1.0
    d0: float = 1.0
    seed: int = 0
    delta: float = 0.95
    w_mode: str = "discount"
    share_beta: bool = False

    def __post_init__(self):
        if not (0.0 < self.omega <= 1.0):
            raise ValidationError("omega must lie in (0, 1]")
        if self.eps1 <= 0.0 or self.eps2 <= 0.0:
            raise ValidationError("MH step sizes must be positive")
        if self.n_samples <= self.burn_in or self.burn_in < 0 or self.thin < 1:
            raise ValidationError("need n_samples > burn_in >= 0 and thin >= 1")
        if self.mode not in ("spatial", "predictive_process", "heterogeneous"):
            raise ValidationError(f"unknown mode {self.mode!r}")
        if self.mode == "predictive_process" and self.knots is None:
            raise ValidationError("predictive_process mode requires knots")
        if not (0.0 < self.delta <= 1.0):
            raise ValidationError("delta must lie in (0, 1]")
        if self.w_mode not in ("discount", "unit"):
            raise ValidationError(f"unknown w_mode {self.w_mode!r}")
        if self.prior_sd <= 0.0 or self.n0 <= 0.0 or self.d0 <= 0.0:
            raise ValidationError("prior_sd, n0, d0 must be positive")

    @property
    def n_kept(self) -> int:
        return (self.n_samples - self.burn_in + self.thin - 1) // self.thin


@dataclass
class EmulatorDraws:
    """Retained posterior samples from one emulator fit.

    ``theta`` is (draw, time 0..T_eff, location, lag); ``v`` (draw,
    time); ``beta`` (draw, input dim); ``omega_sp`` (draw, space dim) or
    None when the spatial correlation is fixed; ``h_t`` (draw, p, p)
    unit-diagonal cross-lag correlations. ``times`` are the 1-based
    training times emulated (p+1 .. T).
    """

    theta: np.ndarray
    v: np.ndarray
    beta: np.ndarray
    omega_sp: np.ndarray | None
    h_t: np.ndarray
    accept_omega: float
    accept_beta: float
    times: np.ndarray
    mode: str
    knots: KnotSet | None = None

    def __post_init__(self):
        if np.any(self.v <= 0.0):
            raise NumericError("retained v draws must be positive")
        if self.h_t is not None and not np.allclose(
            np.diagonal(self.h_t, axis1=-2, axis2=-1), 1.0, atol=1e-10
        ):
            raise NumericError("h_t draws must have unit diagonal")

    @property
    def n_kept(self) -> int:
        return self.theta.shape[0]


# ---------------------------------------------------------------------------
# AR design construction
# ---------------------------------------------------------------------------


def build_ar_design(y: np.ndarray, t: int, j: int, p: int) -> np.ndarray:
    """Lagged-output regression matrix F_t(s_j), shape (runs, p).

    Row i holds (y_{t-1}(s_j, x_i), ..., y_{t-p}(s_j, x_i)) with t
    1-based; requires t > p so every lag exists.
    """
    y = np.asarray(y, dtype=float)
    if not 0 < p < t <= y.shape[0]:
        raise ValidationError(f"need p < t <= T, got t={t}, p={p}, T={y.shape[0]}")
    lags = [y[t - 1 - k, j, :] for k in range(1, p + 1)]
    return np.column_stack(lags)


def _ar_stack(y: np.ndarray, p: int) -> tuple[np.ndarray, np.ndarray]:
    """All AR designs and targets: ((T-p, S, N, p), (T-p, S, N))."""
    n_times, n_loc, _ = y.shape
    f_obs = np.stack(
        [
            np.stack([build_ar_design(y, t, j, p) for j in range(n_loc)])
            for t in range(p + 1, n_times + 1)
        ]
    )
    return f_obs, y[p:]


# ---------------------------------------------------------------------------
# Metropolis pieces
# ---------------------------------------------------------------------------


def _log_normal_prior(x: np.ndarray, sd: float) -> float:
    """Sum of independent log-normal(0, sd^2) log densities."""
    lx = np.log(x)
    return float(np.sum(-lx - 0.5 * (lx / sd) ** 2 - np.log(sd) - 0.5 * _LOG2PI))


def _log_rw_step(value, ll_cur, loglik_fn, eps, prior_sd, rng):
    """One positive-scale random-walk Metropolis step.

    Proposes value * exp(eps z), accepts with the target ratio times
    the proposal Jacobian prod(psi*_i / psi_i). Returns
    (value, loglik, accepted).
    """
    value = np.atleast_1d(np.asarray(value, dtype=float))
    prop = value * np.exp(eps * rng.standard_normal(value.shape))
    ll_prop = loglik_fn(prop)
    log_ratio = (
        ll_prop
        - ll_cur
        + _log_normal_prior(prop, prior_sd)
        - _log_normal_prior(value, prior_sd)
        + float(np.sum(np.log(prop)) - np.sum(np.log(value)))
    )
    if np.isfinite(log_ratio) and np.log(rng.uniform()) < log_ratio:
        return prop, ll_prop, True
    return value, ll_cur, False


def _transition_loglik(theta_flat, v, kron: KroneckerCorr) -> float:
    """Sum over t of log N(theta_t | theta_{t-1}, v_t * (H x T))."""
    delta = theta_flat[1:] - theta_flat[:-1]
    quads = kron.quad_form(delta)
    dim = theta_flat.shape[1]
    vt = v[1:]
    return float(
        np.sum(-0.5 * dim * (_LOG2PI + np.log(vt)) - 0.5 * kron.log_det - 0.5 * quads / vt)
    )


def _conditional_obs_loglik(resid, v, lv) -> float:
    """Sum over (t, j) of log N(y_t(s_j) | F theta, v_t V(beta)).

    ``resid`` is (T_eff, S, N) of per-run residuals at the current
    state draw; ``lv`` the Cholesky factor of V(beta).
    """
    t_eff, n_loc, n_runs = resid.shape
    z = tri_solve(lv, resid.reshape(t_eff * n_loc, n_runs).T)
    quads = np.sum(z**2, axis=0).reshape(t_eff, n_loc)
    logdet = logdet_from_chol(lv)
    vt = v[1:, None]
    return float(
        np.sum(-0.5 * n_runs * (_LOG2PI + np.log(vt)) - 0.5 * logdet - 0.5 * quads / vt)
    )


# ---------------------------------------------------------------------------
# Stacked-state filtering (information form)
# ---------------------------------------------------------------------------


def _stacked_filter(y_obs, f_obs, lv, w_dense, omega, n0, d0):
    """Forward filter over the stacked (S*p)-dimensional state.

    Identity transition; observations are per-location GP regressions
    sharing one V(beta) factor ``lv``. Uses the information form so the
    per-time cost stays in the state dimension, not the N*S data
    dimension. Returns an ``ssm.FilterState`` (q, Q left as None).
    """
    t_eff, n_loc, n_runs = y_obs.shape
    p = f_obs.shape[3]
    dim = n_loc * p

    a = np.zeros((t_eff + 1, dim))
    big_a = np.zeros((t_eff + 1, dim, dim))
    m = np.zeros((t_eff + 1, dim))
    big_m = np.zeros((t_eff + 1, dim, dim))
    n = np.zeros(t_eff + 1)
    d = np.zeros(t_eff + 1)
    n_star = np.zeros(t_eff + 1)
    d_star = np.zeros(t_eff + 1)
    fc = np.zeros(t_eff + 1)

    big_m[0] = np.eye(dim)
    n[0], d[0] = n0, d0
    n_star[0], d_star[0] = n0, d0
    big_a[0] = big_m[0]
    logdet_v = logdet_from_chol(lv)

    for t in range(1, t_eff + 1):
        a[t] = m[t - 1]
        big_a[t] = sym(big_m[t - 1] + w_dense)
        n_star[t] = omega * n[t - 1]
        d_star[t] = omega * d[t - 1]

        la = chol_lower_exact(big_a[t], max_jitter=1e-6)
        a_inv = inv_from_chol(la)

        f_t = f_obs[t - 1]                      # (S, N, p)
        vf = cho_solve(lv, f_t.transpose(1, 0, 2).reshape(n_runs, n_loc * p))
        vf = vf.reshape(n_runs, n_loc, p).transpose(1, 0, 2)   # V^{-1} F per loc
        resid = y_obs[t - 1] - np.einsum("jnp,jp->jn", f_t, a[t].reshape(n_loc, p))
        g = np.einsum("jnp,jn->jp", vf, resid).reshape(dim)
        prec = a_inv.copy()
        for j in range(n_loc):
            blk = slice(j * p, (j + 1) * p)
            prec[blk, blk] += f_t[j].T @ vf[j]
        lp = chol_lower_exact(sym(prec), max_jitter=1e-6)
        big_m[t] = sym(inv_from_chol(lp))
        m[t] = a[t] + big_m[t] @ g

        vr = cho_solve(lv, resid.T)
        quad = float(np.sum(resid.T * vr) - g @ big_m[t] @ g)
        n[t] = n_star[t] + 0.5 * n_runs * n_loc
        d[t] = d_star[t] + 0.5 * quad
        if d[t] <= 0.0 or not np.isfinite(d[t]):
            raise NumericError(f"filter scale collapsed at step {t}")

        n_data = n_runs * n_loc
        dof = 2.0 * n_star[t]
        logdet_q = n_loc * logdet_v + 2.0 * (
            np.sum(np.log(np.diag(la))) + np.sum(np.log(np.diag(lp)))
        )
        qf_sigma = quad * n_star[t] / d_star[t]
        fc[t] = (
            gammaln(0.5 * (dof + n_data))
            - gammaln(0.5 * dof)
            - 0.5 * n_data * np.log(dof * np.pi)
            - 0.5 * (n_data * np.log(d_star[t] / n_star[t]) + logdet_q)
            - 0.5 * (dof + n_data) * np.log1p(qf_sigma / dof)
        )

    return ssm.FilterState(
        a=a, A=big_a, q=None, Q=None, m=m, M=big_m, n=n, d=d,
        n_star=n_star, d_star=d_star, forecast_logpdf=fc,
    )


def _spatial_corr_builder(ens: TrainingEnsemble, cfg: EmulatorConfig):
    """Return (h_builder(omega_sp) -> H, fixed_h or None, space_dim)."""
    if ens.adjacency is not None:
        fixed = adjacency_corr(ens.adjacency)
        return None, fixed, 0
    dim = ens.locations.shape[1]
    if cfg.mode == "predictive_process":
        knots = cfg.knots

        def build(omega_sp):
            return predictive_process_spatial_factor(knots, ens.locations, omega_sp)

    else:

        def build(omega_sp):
            return corr_matrix(ens.locations, omega_sp)

    return build, None, dim


# ---------------------------------------------------------------------------
# Main sampler
# ---------------------------------------------------------------------------


def fit_emulator(ens: TrainingEnsemble, cfg: EmulatorConfig) -> EmulatorDraws:
    """Blocked MCMC over (beta, spatial ranges, T, theta, v).

    Per iteration: random-walk Metropolis on the spatial range vector
    against the state-transition likelihood; the same scheme on beta
    against the conditional run-level Gaussian; an optional refresh of
    the cross-lag correlation; and a full FFBS refresh of the latent
    trajectory and scale chain. Raises ``NumericError`` with the
    iteration index if the likelihood degenerates.
    """
    if cfg.mode == "heterogeneous":
        raise ValidationError("use fit_heterogeneous for heterogeneous mode")
    rng = np.random.default_rng(cfg.seed)
    p = ens.p
    n_loc = ens.n_locations
    f_obs, y_obs = _ar_stack(ens.y, p)
    t_eff = y_obs.shape[0]

    h_builder, h_fixed, space_dim = _spatial_corr_builder(ens, cfg)
    h_free = h_fixed is None

    beta = np.ones(ens.n_dims)
    omega_sp = np.ones(space_dim) if h_free else None
    t_mat = np.eye(p)
    t_free = cfg.t_prior is not None
    if t_free:
        nu0 = getattr(cfg.t_prior, "prior_dof", p + 2)
        t0 = np.asarray(getattr(cfg.t_prior, "prior_scale", np.eye(p)), dtype=float)

    lv = chol_lower_exact(corr_matrix(ens.inputs, beta), max_jitter=1e-4)
    h_mat = h_builder(omega_sp) if h_free else h_fixed
    w_dense = KroneckerCorr(h_mat, t_mat).dense()
    fs = _stacked_filter(y_obs, f_obs, lv, w_dense, cfg.omega, cfg.n0, cfg.d0)
    spec = ssm.SsmSpec(
        f=None, g=None, v=np.eye(1), w=w_dense,
        omega=cfg.omega, m0=np.zeros(n_loc * p), M0=np.eye(n_loc * p),
        n0=cfg.n0, d0=cfg.d0,
    )
    draw = ssm.backward_sample(fs, spec, rng)
    theta_flat, v = draw.theta, draw.v

    def recompute_resid():
        th = theta_flat[1:].reshape(t_eff, n_loc, p)
        return y_obs - np.einsum("tjnp,tjp->tjn", f_obs, th)

    resid = recompute_resid()

    n_kept = cfg.n_kept
    kt = ens.obs_times
    out_theta = np.empty((n_kept, t_eff + 1, n_loc, p))
    out_v = np.empty((n_kept, t_eff + 1))
    out_beta = np.empty((n_kept, ens.n_dims))
    out_omega = np.empty((n_kept, space_dim)) if h_free else None
    out_ht = np.empty((n_kept, p, p))
    acc_omega = 0
    acc_beta = 0
    kept = 0

    for it in range(cfg.n_samples):
        if h_free:
            def trans_ll(cand):
                return _transition_loglik(theta_flat, v, KroneckerCorr(h_builder(cand), t_mat))

            ll_cur = _transition_loglik(theta_flat, v, KroneckerCorr(h_mat, t_mat))
            omega_sp, _, accepted = _log_rw_step(
                omega_sp, ll_cur, trans_ll, cfg.eps1, cfg.prior_sd, rng
            )
            if accepted:
                h_mat = h_builder(omega_sp)
                acc_omega += 1

        def obs_ll(cand):
            lv_cand = chol_lower_exact(corr_matrix(ens.inputs, cand), max_jitter=1e-4)
            return _conditional_obs_loglik(resid, v, lv_cand)

        ll_cur = _conditional_obs_loglik(resid, v, lv)
        beta, _, accepted = _log_rw_step(beta, ll_cur, obs_ll, cfg.eps2, cfg.prior_sd, rng)
        if accepted:
            lv = chol_lower_exact(corr_matrix(ens.inputs, beta), max_jitter=1e-4)
            acc_beta += 1

        if t_free:
            diff = theta_flat[1:] - theta_flat[:-1]
            diff = diff.reshape(t_eff * n_loc, p)
            ss = diff.T @ diff
            df = 2.0 * nu0 + t_eff
            scale = np.linalg.inv(2.0 * t0 + ss)
            prec_draw = scipy.stats.wishart.rvs(df=df, scale=scale, random_state=rng)
            prec_draw = np.atleast_2d(prec_draw)
            t_mat = corr_from_cov(np.linalg.inv(prec_draw))

        w_dense = KroneckerCorr(h_mat, t_mat).dense()
        try:
            fs = _stacked_filter(y_obs, f_obs, lv, w_dense, cfg.omega, cfg.n0, cfg.d0)
        except NumericError as exc:
            raise NumericError(f"iteration {it}: {exc}") from exc
        spec.w = w_dense
        draw = ssm.backward_sample(fs, spec, rng)
        theta_flat, v = draw.theta, draw.v
        resid = recompute_resid()

        if it >= cfg.burn_in and (it - cfg.burn_in) % cfg.thin == 0:
            out_theta[kept] = theta_flat.reshape(t_eff + 1, n_loc, p)
            out_v[kept] = v
            out_beta[kept] = beta
            if h_free:
                out_omega[kept] = omega_sp
            out_ht[kept] = t_mat
            kept += 1

    return EmulatorDraws(
        theta=out_theta[:kept],
        v=out_v[:kept],
        beta=out_beta[:kept],
        omega_sp=out_omega[:kept] if h_free else None,
        h_t=out_ht[:kept],
        accept_omega=acc_omega / cfg.n_samples if h_free else float("nan"),
        accept_beta=acc_beta / cfg.n_samples,
        times=kt,
        mode=cfg.mode,
        knots=cfg.knots,
    )


# ---------------------------------------------------------------------------
# Heterogeneous (independent per-location) sampler
# ---------------------------------------------------------------------------


_CHOL_JITTERS = (0.0, 1e-14, 1e-12, 1e-10, 1e-8, 1e-6, 1e-4)


def _site_corr_chols(diff2: np.ndarray, beta: np.ndarray) -> np.ndarray:
    """Stacked lower Cholesky factors of V(beta_j) per site, (S, N, N).

    ``diff2`` is the precomputed (N, N, d) squared-difference tensor of
    the design. Factorization is attempted without regularization for
    the whole stack at once; if any site fails, each site falls back to
    its own jitter ladder so that regularizing one site's near-singular
    correlation never perturbs another site's chain (sites must stay
    bitwise independent, and a batched sub-block factorization matches
    the single-matrix one exactly).
    """
    corr = np.exp(-np.tensordot(beta, diff2, axes=(1, 2)))
    try:
        return np.linalg.cholesky(corr)
    except np.linalg.LinAlgError:
        pass
    n_runs = diff2.shape[0]
    eye = np.eye(n_runs)
    out = np.empty_like(corr)
    for j in range(beta.shape[0]):
        for jitter in _CHOL_JITTERS:
            try:
                out[j] = np.linalg.cholesky(corr[j] + jitter * eye)
                break
            except np.linalg.LinAlgError:
                continue
        else:
            raise NumericError(
                f"input correlation at location {j} is not positive definite"
            )
    return out


def _vinv_from_chols(lv: np.ndarray) -> np.ndarray:
    """Inverses of V from its stacked lower Cholesky factors."""
    eye = np.broadcast_to(np.eye(lv.shape[-1]), lv.shape).copy()
    li = np.linalg.solve(lv, eye)
    return np.einsum("skn,skm->snm", li, li)


def _batched_inv_spd(mats: np.ndarray) -> np.ndarray:
    """Inverses of a stacked SPD (..., p, p) array; scalar fast path."""
    if mats.shape[-1] == 1:
        return 1.0 / mats
    return np.linalg.inv(mats)


def _batched_psd_sqrt(mats: np.ndarray) -> np.ndarray:
    """Symmetric PSD square roots of a (..., p, p) stack via eigh."""
    if mats.shape[-1] == 1:
        return np.sqrt(np.clip(mats, 0.0, None))
    w, u = np.linalg.eigh(mats)
    w = np.clip(w, 0.0, None)
    return u @ (np.sqrt(w)[..., None] * np.swapaxes(u, -1, -2))


def _log_normal_prior_rows(x: np.ndarray, sd: float) -> np.ndarray:
    """Row sums of independent log-normal(0, sd^2) log densities."""
    lx = np.log(x)
    return np.sum(-lx - 0.5 * (lx / sd) ** 2 - np.log(sd) - 0.5 * _LOG2PI, axis=1)


def _het_filter(f_obs, y_obs, vinv, w_mode, delta, omega, n0, d0):
    """Site-batched conjugate filter in information form.

    Runs S independent filters at once over arrays shaped
    (T_eff, S, ...). State evolution is a random walk whose innovation
    covariance is either the discount construction W_t = M_{t-1}
    (1 - delta) / delta or the identity. Returns the filtered histories
    (m, M, a, A, n, d); A is recorded only in "unit" mode where the
    backward pass needs it (the discount form gives A = M_{t-1} / delta
    and an exact backward gain of delta * I).
    """
    t_eff, n_loc, n_runs, p = f_obs.shape
    eye_p = np.eye(p)
    m_h = np.zeros((t_eff + 1, n_loc, p))
    big_m_h = np.zeros((t_eff + 1, n_loc, p, p))
    a_h = np.zeros((t_eff + 1, n_loc, p))
    n_h = np.zeros((t_eff + 1, n_loc))
    d_h = np.zeros((t_eff + 1, n_loc))
    big_m_h[0] = eye_p
    n_h[0] = n0
    d_h[0] = d0

    vf_all = np.einsum("snm,tsmp->tsnp", vinv, f_obs)            # (T_eff,S,N,p)
    fvf_all = np.einsum("tsnp,tsnq->tspq", f_obs, vf_all)

    big_a_h = np.zeros((t_eff + 1, n_loc, p, p)) if w_mode == "unit" else None
    for t in range(1, t_eff + 1):
        m_prev, big_m_prev = m_h[t - 1], big_m_h[t - 1]
        if w_mode == "discount":
            big_a = big_m_prev / delta
        else:
            big_a = big_m_prev + eye_p
            big_a_h[t] = big_a
        a_h[t] = m_prev
        f_t = f_obs[t - 1]                                       # (S, N, p)
        prec = _batched_inv_spd(big_a) + fvf_all[t - 1]
        big_m_t = _batched_inv_spd(prec)
        big_m_t = 0.5 * (big_m_t + np.swapaxes(big_m_t, 1, 2))
        r = y_obs[t - 1] - np.einsum("snp,sp->sn", f_t, m_prev)
        g = np.einsum("snp,sn->sp", vf_all[t - 1], r)
        m_h[t] = m_prev + np.einsum("spq,sq->sp", big_m_t, g)
        big_m_h[t] = big_m_t
        rv = np.einsum("sn,snm->sm", r, vinv)
        quad = np.einsum("sm,sm->s", rv, r) - np.einsum(
            "sp,spq,sq->s", g, big_m_t, g
        )
        n_h[t] = omega * n_h[t - 1] + 0.5 * n_runs
        d_h[t] = omega * d_h[t - 1] + 0.5 * quad
        if np.any(d_h[t] <= 0.0) or not np.all(np.isfinite(d_h[t])):
            raise NumericError(f"site filter scale collapsed at step {t}")
    return m_h, big_m_h, a_h, big_a_h, n_h, d_h


def fit_heterogeneous(ens: TrainingEnsemble, cfg: EmulatorConfig) -> list[EmulatorDraws]:
    """Independent scalar-location fits with discount-specified W.

    Every location gets its own state/scale chains and (by default) its
    own beta chain; nothing is shared across space, so permuting other
    locations' data leaves a site's draws bit-identical. All randomness
    for site j comes from its own stream split off the master seed; the
    arithmetic is batched across sites. With ``w_mode="unit"`` the state
    innovation is the identity instead of the filtered-moment discount
    construction, matching the spatial model when S = 1.
    """
    p = ens.p
    n_loc = ens.n_locations
    n_runs = ens.n_runs
    n_dims = ens.n_dims
    f_obs, y_obs = _ar_stack(ens.y, p)
    t_eff = y_obs.shape[0]
    delta = cfg.delta
    omega = cfg.omega

    children = np.random.SeedSequence(cfg.seed).spawn(n_loc + 1)
    streams = [np.random.default_rng(s) for s in children[:n_loc]]
    shared_rng = np.random.default_rng(children[n_loc])

    x = ens.inputs
    diff2 = (x[:, None, :] - x[None, :, :]) ** 2
    beta = np.ones((n_loc, n_dims))
    lv_stack = _site_corr_chols(diff2, beta)
    vinv = _vinv_from_chols(lv_stack)

    n_kept = cfg.n_kept
    out_theta = np.empty((n_kept, t_eff + 1, n_loc, p))
    out_v = np.empty((n_kept, t_eff + 1, n_loc))
    out_beta = np.empty((n_kept, n_loc, n_dims))
    acc_beta = np.zeros(n_loc)
    kept = 0

    theta = np.zeros((t_eff + 1, n_loc, p))
    v = np.ones((t_eff + 1, n_loc))
    resid = y_obs - np.einsum("tjnp,tjp->tjn", f_obs, theta[1:])  # (T_eff, S, N)

    def site_loglik_vector(l_stack, v_inv) -> np.ndarray:
        """Conditional observation log-likelihood per site, (S,)."""
        zw = np.einsum("tsn,snm->tsm", resid, v_inv)
        quads = np.einsum("tsm,tsm->ts", zw, resid)                 # (T_eff, S)
        logdets = 2.0 * np.sum(np.log(np.diagonal(l_stack, axis1=1, axis2=2)), axis=1)
        vt = v[1:]                                                  # (T_eff, S)
        return (
            -0.5 * n_runs * np.sum(_LOG2PI + np.log(vt), axis=0)
            - 0.5 * t_eff * logdets
            - 0.5 * np.sum(quads / vt, axis=0)
        )

    def batched_ffbs():
        """Filter + backward sample for every site; updates theta, v."""
        m_h, big_m_h, a_h, big_a_h, n_h, d_h = _het_filter(
            f_obs, y_obs, vinv, cfg.w_mode, delta, omega, cfg.n0, cfg.d0
        )

        # Per-site randomness in a fixed order from each site's stream.
        normals = np.empty((n_loc, t_eff + 1, p))
        prec_term = np.empty(n_loc)
        gam_rest = np.empty((n_loc, t_eff))
        shape_rest = (1.0 - omega) * n_h[t_eff - 1 :: -1].T          # (S, T_eff) t desc
        scale_rest = 1.0 / d_h[t_eff - 1 :: -1].T
        for j in range(n_loc):
            normals[j] = streams[j].standard_normal((t_eff + 1, p))
            prec_term[j] = streams[j].gamma(n_h[t_eff, j], 1.0 / d_h[t_eff, j])
            gam_rest[j] = streams[j].gamma(shape_rest[j], scale_rest[j])

        if cfg.w_mode == "discount":
            sqrt_m_all = _batched_psd_sqrt(
                big_m_h.reshape(-1, p, p)
            ).reshape(t_eff + 1, n_loc, p, p)

        prec = prec_term
        v[t_eff] = 1.0 / prec
        sqrt_m = (
            sqrt_m_all[t_eff]
            if cfg.w_mode == "discount"
            else _batched_psd_sqrt(big_m_h[t_eff])
        )
        theta[t_eff] = m_h[t_eff] + np.sqrt(v[t_eff])[:, None] * np.einsum(
            "spq,sq->sp", sqrt_m, normals[:, t_eff]
        )
        root_one_minus_delta = np.sqrt(1.0 - delta)
        for k, t in enumerate(range(t_eff - 1, -1, -1)):
            prec = omega * prec + gam_rest[:, k]
            v[t] = 1.0 / prec
            if cfg.w_mode == "discount":
                mean = m_h[t] + delta * (theta[t + 1] - a_h[t + 1])
                sqrt_c = root_one_minus_delta * sqrt_m_all[t]
            else:
                gain = np.swapaxes(
                    np.linalg.solve(big_a_h[t + 1], big_m_h[t]), 1, 2
                )
                mean = m_h[t] + np.einsum(
                    "spq,sq->sp", gain, theta[t + 1] - a_h[t + 1]
                )
                cov = big_m_h[t] - gain @ big_m_h[t]
                cov = 0.5 * (cov + np.swapaxes(cov, 1, 2))
                sqrt_c = _batched_psd_sqrt(cov)
            theta[t] = mean + np.sqrt(v[t])[:, None] * np.einsum(
                "spq,sq->sp", sqrt_c, normals[:, t]
            )

    for it in range(cfg.n_samples):
        if cfg.share_beta:
            prop = beta[0] * np.exp(cfg.eps2 * shared_rng.standard_normal(n_dims))
            log_u = np.log(shared_rng.uniform())
            lv_prop = _site_corr_chols(diff2, np.tile(prop, (n_loc, 1)))
            vinv_prop = _vinv_from_chols(lv_prop)
            ll_cur = float(np.sum(site_loglik_vector(lv_stack, vinv)))
            ll_prop = float(np.sum(site_loglik_vector(lv_prop, vinv_prop)))
            log_ratio = (
                ll_prop
                - ll_cur
                + _log_normal_prior(prop, cfg.prior_sd)
                - _log_normal_prior(beta[0], cfg.prior_sd)
                + float(np.sum(np.log(prop)) - np.sum(np.log(beta[0])))
            )
            if np.isfinite(log_ratio) and log_u < log_ratio:
                beta[:] = prop
                lv_stack, vinv = lv_prop, vinv_prop
                acc_beta += 1
        else:
            props = np.empty_like(beta)
            log_u = np.empty(n_loc)
            for j in range(n_loc):
                props[j] = beta[j] * np.exp(
                    cfg.eps2 * streams[j].standard_normal(n_dims)
                )
                log_u[j] = np.log(streams[j].uniform())
            lv_prop = _site_corr_chols(diff2, props)
            vinv_prop = _vinv_from_chols(lv_prop)
            ll_cur = site_loglik_vector(lv_stack, vinv)
            ll_prop = site_loglik_vector(lv_prop, vinv_prop)
            log_ratio = (
                ll_prop
                - ll_cur
                + _log_normal_prior_rows(props, cfg.prior_sd)
                - _log_normal_prior_rows(beta, cfg.prior_sd)
                + np.sum(np.log(props) - np.log(beta), axis=1)
            )
            take = np.isfinite(log_ratio) & (log_u < log_ratio)
            beta[take] = props[take]
            lv_stack[take] = lv_prop[take]
            vinv[take] = vinv_prop[take]
            acc_beta += take

        batched_ffbs()
        resid = y_obs - np.einsum("tjnp,tjp->tjn", f_obs, theta[1:])

        if it >= cfg.burn_in and (it - cfg.burn_in) % cfg.thin == 0:
            out_theta[kept] = theta
            out_v[kept] = v
            out_beta[kept] = beta
            kept += 1

    results = []
    for j in range(n_loc):
        results.append(
            EmulatorDraws(
                theta=out_theta[:kept, :, j : j + 1, :],
                v=out_v[:kept, :, j],
                beta=out_beta[:kept, j, :],
                omega_sp=None,
                h_t=None,
                accept_omega=float("nan"),
                accept_beta=float(acc_beta[j]) / cfg.n_samples,
                times=ens.obs_times,
                mode="heterogeneous",
            )
        )
    return results


# ---------------------------------------------------------------------------
# Prediction at new inputs
# ---------------------------------------------------------------------------


def emulator_predict(
    draws: EmulatorDraws,
    ens: TrainingEnsemble,
    eta: np.ndarray,
    initial_lags: np.ndarray | None = None,
    lag_path: np.ndarray | None = None,
):
    """Per-draw predictive mean and variance at a new input.

    For each retained draw, conditions the run-level GP at ``eta``:
    mu_t(s) = f_t(s, eta)' theta_t(s) + r(eta)' V^{-1} (y_t(s) - F_t(s)
    theta_t(s)) and var_t(s) = v_t (1 - r' V^{-1} r). By default the AR
    lag vector at eta is fed recursively from the emulator's own
    predictions, seeded with ``initial_lags`` (shape (p, S), e.g. the
    field data's first p values) or the training-run mean series; this
    forecasts a whole trajectory from scratch. Passing ``lag_path`` (a
    known trajectory, shape (n_times, S) on the standardized scale)
    instead fills every step's lag vector from that trajectory's
    preceding rows, giving one-step-ahead predictions along it.
    Negative round-off variances are clamped to zero with a warning.
    Returns (mu, var) with shape (n_draws, T_eff, S).
    """
    eta = np.atleast_1d(np.asarray(eta, dtype=float))
    if eta.shape != (ens.n_dims,):
        raise ValidationError("eta dimension does not match the design")
    if np.any(eta < 0.0) or np.any(eta > 1.0):
        raise ValidationError("eta must lie in the unit cube")
    p = ens.p
    f_obs, y_obs = _ar_stack(ens.y, p)
    t_eff = y_obs.shape[0]
    n_loc = ens.n_locations
    if lag_path is not None:
        if initial_lags is not None:
            raise ValidationError("pass initial_lags or lag_path, not both")
        path = np.asarray(lag_path, dtype=float)
        if path.shape != (ens.n_times, n_loc):
            raise ValidationError("lag_path must have shape (n_times, n_locations)")
        # f_path[t, j, l] = path value l + 1 steps before row p + t
        f_path = np.stack(
            [path[p - 1 - l : p - 1 - l + t_eff] for l in range(p)], axis=2
        )
    elif initial_lags is None:
        lag_seed = ens.y[:p].mean(axis=2)             # (p, S) training-mean series
    else:
        lag_seed = np.asarray(initial_lags, dtype=float)
        if lag_seed.shape != (p, n_loc):
            raise ValidationError("initial_lags must have shape (p, n_locations)")

    n_kept = draws.n_kept
    mu = np.empty((n_kept, t_eff, n_loc))
    var = np.empty((n_kept, t_eff, n_loc))
    clamped = False

    for k in range(n_kept):
        beta_k = draws.beta[k]
        lv = chol_lower_exact(corr_matrix(ens.inputs, beta_k), max_jitter=1e-4)
        r_vec = corr_matrix(eta[None, :], beta_k, ens.inputs)[0]
        r_sol = cho_solve(lv, r_vec)
        gp_var_unit = 1.0 - float(r_vec @ r_sol)
        if gp_var_unit < 0.0:
            clamped = True
            gp_var_unit = 0.0

        theta_k = draws.theta[k]                       # (T_eff+1, S or 1, p)
        resid = y_obs - np.einsum("tjnp,tjp->tjn", f_obs, theta_k[1:, :, :])
        correction = np.einsum("tjn,n->tj", resid, r_sol)
        v_k = draws.v[k]

        if lag_path is not None:
            mu[k] = np.einsum("tjp,tjp->tj", f_path, theta_k[1:]) + correction
            var[k] = v_k[1:, None] * gp_var_unit
            continue

        # lags[l, j] = prediction at time t - 1 - l
        lags = lag_seed[::-1].copy()                   # row 0 = most recent
        for t in range(t_eff):
            f_eta = lags[:p].T                         # (S, p), column l = lag l+1
            mean_t = (
                np.einsum("jp,jp->j", f_eta, theta_k[t + 1]) + correction[t]
            )
            mu[k, t] = mean_t
            var[k, t] = v_k[t + 1] * gp_var_unit
            lags = np.vstack([mean_t, lags[:-1]])

    if clamped:
        warnings.warn("predictive variance clamped to zero after round-off",
                      RuntimeWarning, stacklevel=2)
    return mu, var


def predict_heterogeneous(
    site_draws: list[EmulatorDraws],
    ens: TrainingEnsemble,
    eta: np.ndarray,
    initial_lags: np.ndarray | None = None,
    lag_path: np.ndarray | None = None,
):
    """Stack per-site predictive means/variances from heterogeneous fits."""
    n_loc = ens.n_locations
    if len(site_draws) != n_loc:
        raise ValidationError("need one draws object per location")
    p = ens.p
    f_obs, y_obs = _ar_stack(ens.y, p)
    t_eff = y_obs.shape[0]
    n_kept = site_draws[0].n_kept
    mu = np.empty((n_kept, t_eff, n_loc))
    var = np.empty((n_kept, t_eff, n_loc))
    if lag_path is not None:
        if initial_lags is not None:
            raise ValidationError("pass initial_lags or lag_path, not both")
        lag_path = np.asarray(lag_path, dtype=float)
        if lag_path.shape != (ens.n_times, n_loc):
            raise ValidationError("lag_path must have shape (n_times, n_locations)")
        lag_seed = None
    elif initial_lags is None:
        lag_seed = ens.y[:p].mean(axis=2)
    else:
        lag_seed = np.asarray(initial_lags, dtype=float)

    for j, dr in enumerate(site_draws):
        sub = TrainingEnsemble(
            y=ens.y[:, j : j + 1, :], design=ens.inputs,
            locations=np.zeros((1, 1)), p=p,
        )
        if lag_path is not None:
            mu_j, var_j = emulator_predict(
                dr, sub, eta, lag_path=lag_path[:, j : j + 1]
            )
        else:
            mu_j, var_j = emulator_predict(
                dr, sub, eta, initial_lags=lag_seed[:, j : j + 1]
            )
        mu[:, :, j] = mu_j[:, :, 0]
        var[:, :, j] = var_j[:, :, 0]
    return mu, var


# ---------------------------------------------------------------------------
# Latent-state interpolation at new locations
# ---------------------------------------------------------------------------


def interpolate_latent(
    draws: EmulatorDraws,
    ens: TrainingEnsemble,
    s_star,
    rng: np.random.Generator,
):
    """Sample the latent state trajectory at an unobserved location.

    For each retained draw, sequentially draws theta_t(s*) from the
    conditional of the joint innovation process: mean theta_{t-1}(s*) +
    (c' H^{-1} (x) I_p)(theta_t - theta_{t-1}), covariance
    v_t (1 - c' H^{-1} c) T, where c holds spatial correlations between
    s* and the training locations. Time zero is kriged directly from
    theta_0. Returns an array (n_draws, T_eff+1, p).
    """
    if draws.mode == "heterogeneous" or ens.locations is None:
        raise ValidationError("latent interpolation requires a spatial fit")
    s_star = np.atleast_1d(np.asarray(s_star, dtype=float))
    n_loc = ens.n_locations
    p = ens.p
    all_pts = np.vstack([ens.locations, s_star[None, :]])
    n_kept = draws.n_kept
    t_eff = draws.theta.shape[1] - 1
    out = np.empty((n_kept, t_eff + 1, p))

    for k in range(n_kept):
        if draws.omega_sp is None:
            raise ValidationError("latent interpolation requires spatial range draws")
        omega_k = draws.omega_sp[k]
        if draws.mode == "predictive_process":
            full = predictive_process_spatial_factor(draws.knots, all_pts, omega_k)
        else:
            full = corr_matrix(all_pts, omega_k)
        h_mat = full[:n_loc, :n_loc]
        c_vec = full[:n_loc, n_loc]
        lh = chol_lower_exact(h_mat, max_jitter=1e-8)
        weights = cho_solve(lh, c_vec)                    # H^{-1} c
        var_unit = max(1.0 - float(c_vec @ weights), 0.0)
        t_k = draws.h_t[k]
        lam_chol = np.sqrt(var_unit) * chol_lower_exact(t_k, max_jitter=1e-10)

        theta_k = draws.theta[k]                          # (T_eff+1, S, p)
        v_k = draws.v[k]
        prev = weights @ theta_k[0] + np.sqrt(v_k[0]) * (lam_chol @ rng.standard_normal(p))
        out[k, 0] = prev
        for t in range(1, t_eff + 1):
            step = weights @ (theta_k[t] - theta_k[t - 1])
            mean_t = prev + step
            prev = mean_t + np.sqrt(v_k[t]) * (lam_chol @ rng.standard_normal(p))
            out[k, t] = prev
    return out
