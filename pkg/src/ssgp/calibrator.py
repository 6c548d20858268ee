"""Bayesian calibration of simulator inputs against field data.

The sampler is modularized twice: emulator posterior draws are taken
as given and cycled through in a fixed order, never re-weighted by the
field data; and the dynamic bias model is fit to residuals without
ever feeding back into the input step, which treats the emulator as an
unbiased representation of the field so the discrepancy process cannot
absorb the input signal. Each iteration advances to the next stored
emulator draw, makes a logit random-walk Metropolis step on the
unit-cube input ``eta`` against the bias-free Gaussian field
likelihood (whose observation variances follow their own discount
ladder), forms the residuals between the field data and the emulator
predictive mean, and refreshes the dynamic bias model on those
residuals: a log random-walk Metropolis step on the bias GP range
``rho`` followed by a forward-filter backward-sample refresh of the
bias states ``u`` and observation variances ``nu``. The bias follows a
random walk over time with spatially correlated innovations, and
``nu`` evolves through the same discount mechanism as the emulator's
observation variance. With the bias disabled, ``u`` is identically
zero and ``nu`` is the input step's own ladder.

Emulator predictions inside the likelihood are one-step-ahead: the AR
lag vector at each time holds the observed field values from the
preceding rows, never the emulator's own recursive output, so the
field likelihood factorizes over time into one-step-ahead predictive
densities and emulator error cannot compound across the trajectory.
Posterior replicates are the opposite: each is a whole fresh
trajectory under the fitted model, recursing the emulator from the
field's first rows with every sampled value fed back as the next lag,
then shifted by the bias states and jittered with observation noise.
Their spread therefore reflects input uncertainty and compounding
emulator error over the horizon, which is what scoring should see.

Field data enter on their original scale and are standardized with the
training ensemble's per-location scaling; posterior replicates are
transformed back before storage so scoring happens on the data scale.
"""

import dataclasses
import warnings
from dataclasses import dataclass

import numpy as np
from scipy.special import expit, logit

from . import ssm
from ._linalg import chol_lower_exact, cho_solve, tri_solve
from .emulator import (
    EmulatorDraws,
    TrainingEnsemble,
    _ar_stack,
    _log_rw_step,
    _site_corr_chols,
    _vinv_from_chols,
    emulator_predict,
)
from .errors import NumericError, ValidationError
from .kernels import corr_matrix

_LOG2PI = np.log(2.0 * np.pi)


# ---------------------------------------------------------------------------
# Data containers
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class FieldData:
    """Field observations on the training grid.

    ``z`` has one row per training time and one column per training
    location, on the original data scale, with no missing values.
    """

    z: np.ndarray

    def __post_init__(self):
        z = np.ascontiguousarray(self.z, dtype=float)
        object.__setattr__(self, "z", z)
        if z.ndim != 2:
            raise ValidationError(
                f"field data must be a (time, location) array, got ndim={z.ndim}"
            )
        if not np.all(np.isfinite(z)):
            raise ValidationError("field data must be finite with no missing values")

    @property
    def n_times(self) -> int:
        return self.z.shape[0]

    @property
    def n_locations(self) -> int:
        return self.z.shape[1]


@dataclass(frozen=True)
class CalibConfig:
    """Settings for the calibration sampler.

    ``eps3`` is the shared random-walk step size for both the logit
    step on eta and the log step on rho. ``b`` is the bias model's
    variance discount. ``emu_stride`` thins the stored emulator draws
    before cycling; ``draw_order`` overrides the cycle with an explicit
    index sequence (used to verify modularity). ``n0``/``d0`` set the
    Gamma prior on the initial observation precision.
    """

    eps3: float = 0.1
    b: float = 0.95
    bias_enabled: bool = True
    rho_prior_sd: float = 1.5
    n_samples: int = 10000
    burn_in: int = 2000
    thin: int = 10
    seed: int = 0
    emu_stride: int = 1
    n0: float = 1.0
    d0: float = 1.0
    draw_order: tuple | None = None

    def __post_init__(self):
        if self.eps3 <= 0.0:
            raise ValidationError(f"eps3 must be positive, got {self.eps3}")
        if not (0.0 < self.b <= 1.0):
            raise ValidationError(f"b must lie in (0, 1], got {self.b}")
        if self.rho_prior_sd <= 0.0:
            raise ValidationError("rho_prior_sd must be positive")
        if self.n_samples <= 0 or not (0 <= self.burn_in < self.n_samples):
            raise ValidationError(
                f"need 0 <= burn_in < n_samples, got {self.burn_in}, {self.n_samples}"
            )
        if self.thin < 1:
            raise ValidationError("thin must be at least 1")
        if self.emu_stride < 1:
            raise ValidationError("emu_stride must be at least 1")
        if self.n0 <= 0.0 or self.d0 <= 0.0:
            raise ValidationError("n0 and d0 must be positive")
        if self.draw_order is not None:
            order = tuple(int(k) for k in self.draw_order)
            if len(order) == 0:
                raise ValidationError("draw_order must be nonempty when given")
            object.__setattr__(self, "draw_order", order)

    @property
    def n_kept(self) -> int:
        return (self.n_samples - self.burn_in + self.thin - 1) // self.thin


@dataclass(frozen=True)
class CalibrationDraws:
    """Retained calibration samples.

    ``eta`` is (draw, input dim) on the unit cube; ``rho`` (draw, space
    dim) or None when the bias is disabled; ``u`` (draw, time 0..T_eff,
    location) and ``nu`` (draw, time) live on the standardized training
    scale; ``z_rep`` (draw, time, location) holds posterior replicates
    on the data scale, each a recursive emulator trajectory at that
    draw's input plus bias and observation noise. ``times`` are the
    1-based times calibrated.
    """

    eta: np.ndarray
    rho: np.ndarray | None
    u: np.ndarray
    nu: np.ndarray
    z_rep: np.ndarray
    accept_eta: float
    accept_rho: float
    times: np.ndarray
    bias_enabled: bool

    def __post_init__(self):
        if np.any(self.eta <= 0.0) or np.any(self.eta >= 1.0):
            raise NumericError("eta draws must lie strictly inside the unit cube")
        if np.any(self.nu <= 0.0) or not np.all(np.isfinite(self.nu)):
            raise NumericError("retained nu draws must be positive and finite")
        if self.u.shape[:2] != (self.eta.shape[0], self.nu.shape[1]):
            raise ValidationError("u draws are inconsistent with eta and nu")

    @property
    def n_kept(self) -> int:
        return self.eta.shape[0]


# ---------------------------------------------------------------------------
# Field-data likelihood
# ---------------------------------------------------------------------------


def calib_loglik(z, mu, gp_var, nu, u=None) -> float:
    """Gaussian field-data log likelihood under one emulator draw.

    The mean at (t, s) is ``mu[t, s]`` plus the bias ``u[t+1, s]`` when
    a bias path is given; the variance is ``nu[t+1] + gp_var[t, s]``.
    ``z``, ``mu``, and ``gp_var`` are (T_eff, S) on the standardized
    scale; ``nu`` is (T_eff + 1,) with the baseline in slot 0; ``u`` is
    (T_eff + 1, S). Negative round-off in ``gp_var`` is clamped to
    zero, matching the emulator's prediction policy.
    """
    z = np.asarray(z, dtype=float)
    mu = np.asarray(mu, dtype=float)
    gp_var = np.asarray(gp_var, dtype=float)
    nu = np.asarray(nu, dtype=float)
    if z.ndim != 2 or mu.shape != z.shape or gp_var.shape != z.shape:
        raise ValidationError("z, mu, and gp_var must share a (time, location) shape")
    if nu.shape != (z.shape[0] + 1,):
        raise ValidationError("nu must hold one variance per time plus a baseline")
    mean = mu
    if u is not None:
        u = np.asarray(u, dtype=float)
        if u.shape != (z.shape[0] + 1, z.shape[1]):
            raise ValidationError("u must be (T_eff + 1, n_locations)")
        mean = mu + u[1:]
    var = nu[1:, None] + np.clip(gp_var, 0.0, None)
    if np.any(var <= 0.0):
        raise NumericError("nonpositive predictive variance in the field likelihood")
    resid = z - mean
    return float(-0.5 * np.sum(_LOG2PI + np.log(var) + resid**2 / var))


def _bias_transition_loglik(u, nu, lw) -> float:
    """Sum over t of log N(u_t | u_{t-1}, nu_t U) given chol(U) = lw."""
    diffs = u[1:] - u[:-1]                      # (T_eff, S)
    zs = tri_solve(lw, diffs.T)                 # (S, T_eff)
    quads = np.sum(zs * zs, axis=0)
    n_loc = u.shape[1]
    logdet = 2.0 * float(np.sum(np.log(np.diagonal(lw))))
    nu_t = nu[1:]
    return float(
        np.sum(-0.5 * (n_loc * (_LOG2PI + np.log(nu_t)) + logdet + quads / nu_t))
    )


def _nu_only_update(resid, b, n0, d0, rng) -> np.ndarray:
    """Refresh nu_{0:T} with the bias fixed at zero.

    The residuals are then independent N(0, nu_t) across locations, so
    the forward pass reduces to a scalar discount filter on sums of
    squares, and the backward pass is the usual Gamma/Shifted-Gamma
    precision chain.
    """
    t_eff, n_loc = resid.shape
    n = np.empty(t_eff + 1)
    d = np.empty(t_eff + 1)
    n[0], d[0] = n0, d0
    for t in range(1, t_eff + 1):
        n[t] = b * n[t - 1] + 0.5 * n_loc
        d[t] = b * d[t - 1] + 0.5 * float(resid[t - 1] @ resid[t - 1])
    if not np.all(np.isfinite(d)) or np.any(d <= 0.0):
        raise NumericError("noise-variance filter collapsed")
    nu = np.empty(t_eff + 1)
    prec = rng.gamma(n[-1], 1.0 / d[-1])
    nu[-1] = 1.0 / prec
    for t in range(t_eff - 1, -1, -1):
        prec = ssm.draw_shifted_gamma_precision(
            (1.0 - b) * n[t], d[t], b * prec, rng
        )
        nu[t] = 1.0 / prec
    if not np.all(np.isfinite(nu)) or np.any(nu <= 0.0):
        raise NumericError("noise-variance draw collapsed")
    return nu


# ---------------------------------------------------------------------------
# Per-draw emulator prediction
# ---------------------------------------------------------------------------


def _stack_site_draws(site_draws):
    """Stack per-site heterogeneous draws into (beta, theta, v) arrays."""
    beta = np.stack([dr.beta for dr in site_draws], axis=1)          # (K, S, d)
    theta = np.concatenate([dr.theta for dr in site_draws], axis=2)  # (K, T+1, S, p)
    v = np.stack([dr.v for dr in site_draws], axis=2)                # (K, T+1, S)
    return beta, theta, v


def _sample_freerun(theta_k, v_k, gp_unit, correction, init_lags, rng):
    """Sample one emulator trajectory by feeding its draws back as lags.

    ``theta_k`` is (T_eff+1, S, p) (an S of 1 broadcasts), ``v_k`` the
    scale ladder ((T_eff+1,) shared or (T_eff+1, S) per site),
    ``gp_unit`` the unit-scale GP conditional variance (scalar or
    (S,)), ``correction`` the (T_eff, S) kriging pull toward the
    training residuals, and ``init_lags`` the (p, S) seed rows in time
    order. Each step draws y_t from its GP conditional and uses the
    sampled value in the next lag vector, so uncertainty compounds over
    the horizon the way a recursive forecast's should.
    """
    t_eff, n_loc = correction.shape
    p = init_lags.shape[0]
    lags = init_lags[::-1].copy()                  # row 0 = most recent
    out = np.empty((t_eff, n_loc))
    for t in range(t_eff):
        th = np.broadcast_to(theta_k[t + 1], (n_loc, p))
        mean_t = np.einsum("jp,jp->j", lags[:p].T, th) + correction[t]
        sd_t = np.sqrt(v_k[t + 1] * gp_unit)
        y_t = mean_t + sd_t * rng.standard_normal(n_loc)
        out[t] = y_t
        lags = np.vstack([y_t, lags[:-1]])
    return out


def _make_predictor(emu, ens: TrainingEnsemble, lag_path=None):
    """Build per-draw prediction closures over the stored emulator fit.

    Returns (n_stored, predict, freerun). ``predict(k, eta)`` gives
    (mu, gp_var), both (T_eff, S), with ``gp_var`` the v_t-scaled GP
    conditional variance (no observation noise); predictions are
    one-step-ahead along ``lag_path`` (a known trajectory, (n_times, S)
    standardized; training-run mean when None), each time's AR lag
    vector holding that trajectory's preceding rows.
    ``freerun(k, eta, rng)`` samples a whole trajectory recursively
    from ``lag_path``'s first p rows, feeding each sampled value back
    into the next lag vector. Spatial fits delegate the one-step path
    to ``emulator_predict`` on a one-draw slice; heterogeneous fits use
    a site-batched equivalent.
    """
    p = ens.p
    if lag_path is None:
        lag_path = ens.y.mean(axis=2)
    else:
        lag_path = np.asarray(lag_path, dtype=float)
        if lag_path.shape != (ens.n_times, ens.n_locations):
            raise ValidationError("lag_path must have shape (n_times, n_locations)")
    init_lags = lag_path[:p]

    if isinstance(emu, EmulatorDraws):
        if emu.mode == "heterogeneous":
            raise ValidationError(
                "pass the per-site draws list for heterogeneous fits"
            )
        x = ens.inputs
        f_obs, y_obs = _ar_stack(ens.y, p)

        def predict(k, eta):
            one = dataclasses.replace(
                emu,
                theta=emu.theta[k : k + 1],
                v=emu.v[k : k + 1],
                beta=emu.beta[k : k + 1],
                omega_sp=None if emu.omega_sp is None else emu.omega_sp[k : k + 1],
                h_t=emu.h_t[k : k + 1],
            )
            mu, var = emulator_predict(one, ens, eta, lag_path=lag_path)
            return mu[0], var[0]

        def freerun(k, eta, rng):
            beta_k = emu.beta[k]
            lv = chol_lower_exact(corr_matrix(x, beta_k), max_jitter=1e-4)
            r_vec = corr_matrix(eta[None, :], beta_k, x)[0]
            r_sol = cho_solve(lv, r_vec)
            gp_unit = max(1.0 - float(r_vec @ r_sol), 0.0)
            theta_k = emu.theta[k]
            resid = y_obs - np.einsum("tjnp,tjp->tjn", f_obs, theta_k[1:])
            correction = np.einsum("tjn,n->tj", resid, r_sol)
            return _sample_freerun(
                theta_k, emu.v[k], gp_unit, correction, init_lags, rng
            )

        return emu.n_kept, predict, freerun

    site_draws = list(emu)
    if len(site_draws) != ens.n_locations:
        raise ValidationError("need one draws object per location")
    if any(dr.mode != "heterogeneous" for dr in site_draws):
        raise ValidationError("site draw lists must come from a heterogeneous fit")
    if len({dr.n_kept for dr in site_draws}) != 1:
        raise ValidationError("site draws must have equal retained lengths")
    beta_all, theta_all, v_all = _stack_site_draws(site_draws)
    x = ens.inputs
    diff2 = (x[:, None, :] - x[None, :, :]) ** 2
    f_obs, y_obs = _ar_stack(ens.y, p)
    t_eff = y_obs.shape[0]
    f_path = np.stack(
        [lag_path[p - 1 - l : p - 1 - l + t_eff] for l in range(p)], axis=2
    )

    def components(k, eta):
        beta_k = beta_all[k]                                         # (S, d)
        vinv = _vinv_from_chols(_site_corr_chols(diff2, beta_k))
        r = np.exp(
            -np.sum(beta_k[:, None, :] * (eta[None, None, :] - x[None, :, :]) ** 2,
                    axis=2)
        )                                                            # (S, N)
        r_sol = np.einsum("snm,sm->sn", vinv, r)
        gp_unit = np.clip(1.0 - np.einsum("sn,sn->s", r, r_sol), 0.0, None)
        theta_k = theta_all[k]                                       # (T_eff+1, S, p)
        resid = y_obs - np.einsum("tsnp,tsp->tsn", f_obs, theta_k[1:])
        correction = np.einsum("tsn,sn->ts", resid, r_sol)
        return theta_k, v_all[k], gp_unit, correction

    def predict(k, eta):
        theta_k, v_k, gp_unit, correction = components(k, eta)
        mu = np.einsum("tsp,tsp->ts", f_path, theta_k[1:]) + correction
        gp_var = v_k[1:] * gp_unit[None, :]
        return mu, gp_var

    def freerun(k, eta, rng):
        theta_k, v_k, gp_unit, correction = components(k, eta)
        return _sample_freerun(theta_k, v_k, gp_unit, correction, init_lags, rng)

    return site_draws[0].n_kept, predict, freerun


# ---------------------------------------------------------------------------
# Calibration sampler
# ---------------------------------------------------------------------------


def calibrate(z, emu, ens: TrainingEnsemble, cfg: CalibConfig) -> CalibrationDraws:
    """Sample inputs, bias states, and noise variances given field data.

    ``emu`` is either the draws from a spatial fit or the per-site list
    from a heterogeneous fit; it must have been produced without access
    to ``z``. Output is a pure function of (z, stored draws, ens, cfg):
    three RNG streams split from ``cfg.seed`` drive the eta step, the
    variance/bias updates, and the replicate draws independently. The
    eta acceptance never sees the bias states or their variance ladder,
    so the bias refresh cannot feed back into the input posterior.
    """
    if not isinstance(z, FieldData):
        z = FieldData(np.asarray(z))
    if z.z.shape != (ens.n_times, ens.n_locations):
        raise ValidationError(
            f"field data shape {z.z.shape} does not match the training grid "
            f"{(ens.n_times, ens.n_locations)}"
        )
    p = ens.p
    t_eff = ens.n_times - p
    n_loc = ens.n_locations
    d = ens.n_dims
    std = ens.standardizer
    z_full = std.transform(z.z, axis=1) if std is not None else z.z
    z_std = z_full[p:]

    # One-step-ahead structure: each time's AR lag vector holds the
    # observed field values from the preceding rows, so the field
    # likelihood factorizes over time into one-step-ahead predictive
    # densities given the field's own past. Replicates instead recurse
    # freely from the field's first rows, compounding emulator
    # uncertainty over the whole horizon.
    n_stored, predict, freerun = _make_predictor(emu, ens, lag_path=z_full)
    if cfg.draw_order is not None:
        order = np.asarray(cfg.draw_order, dtype=int)
        if np.any(order < 0) or np.any(order >= n_stored):
            raise ValidationError("draw_order entries must index the stored draws")
    else:
        order = np.arange(0, n_stored, cfg.emu_stride)
    n_cycle = order.size

    if cfg.bias_enabled:
        if ens.locations is None:
            raise ValidationError(
                "dynamic bias correction requires coordinate locations"
            )
        locations = ens.locations
        d_s = locations.shape[1]
        rho = np.ones(d_s)
        eye_loc = np.eye(n_loc)

    children = np.random.SeedSequence(cfg.seed).spawn(3)
    rng_eta = np.random.default_rng(children[0])
    rng_bias = np.random.default_rng(children[1])
    rng_rep = np.random.default_rng(children[2])

    eta = np.full(d, 0.5)
    u = np.zeros((t_eff + 1, n_loc))
    nu = np.ones(t_eff + 1)
    nu_cal = np.ones(t_eff + 1)

    kept = cfg.n_kept
    out_eta = np.empty((kept, d))
    out_rho = np.empty((kept, d_s)) if cfg.bias_enabled else None
    out_u = np.empty((kept, t_eff + 1, n_loc))
    out_nu = np.empty((kept, t_eff + 1))
    out_rep = np.empty((kept, t_eff, n_loc))
    acc_eta = 0
    acc_rho = 0
    warned_wrap = False
    slot = 0

    for it in range(cfg.n_samples):
        if it == n_cycle and not warned_wrap:
            warnings.warn(
                f"stored emulator draws exhausted after {n_cycle} iterations; "
                "cycling from the start",
                RuntimeWarning,
                stacklevel=2,
            )
            warned_wrap = True
        idx = int(order[it % n_cycle])

        mu_cur, gpv_cur = predict(idx, eta)
        ll_cur = calib_loglik(z_std, mu_cur, gpv_cur, nu_cal)

        # Logit random-walk step on eta under the unit-cube uniform
        # prior; the transform contributes the Jacobian ratio
        # prod_i eta*_i(1 - eta*_i) / [eta_i(1 - eta_i)]. A proposal
        # saturating to 0 or 1 makes the ratio -inf and is rejected.
        # The bias states never enter this step: its likelihood treats
        # the emulator as an unbiased representation of the field, so
        # the discrepancy process cannot absorb the input signal.
        prop = expit(logit(eta) + cfg.eps3 * rng_eta.standard_normal(d))
        log_u_step = np.log(rng_eta.uniform())
        with np.errstate(divide="ignore"):
            jac_cur = float(np.sum(np.log(eta) + np.log1p(-eta)))
            jac_prop = float(np.sum(np.log(prop) + np.log1p(-prop)))
        mu_prop, gpv_prop = predict(idx, prop)
        ll_prop = calib_loglik(z_std, mu_prop, gpv_prop, nu_cal)
        log_ratio = ll_prop - ll_cur + jac_prop - jac_cur
        if np.isfinite(log_ratio) and log_u_step < log_ratio:
            eta, mu_cur, gpv_cur = prop, mu_prop, gpv_prop
            acc_eta += 1

        # Gap between field data and the emulator's predictive mean;
        # the input step's own variance ladder and the bias model are
        # both fit to this series.
        resid = z_std - mu_cur
        nu_cal = _nu_only_update(resid, cfg.b, cfg.n0, cfg.d0, rng_bias)

        if cfg.bias_enabled:

            def trans_ll(rho_cand):
                lw = chol_lower_exact(
                    corr_matrix(locations, rho_cand), max_jitter=1e-8
                )
                return _bias_transition_loglik(u, nu, lw)

            rho, _, acc = _log_rw_step(
                rho, trans_ll(rho), trans_ll, cfg.eps3, cfg.rho_prior_sd, rng_bias
            )
            acc_rho += acc
            spec = ssm.SsmSpec(
                f=eye_loc, g=None, v=eye_loc, w=corr_matrix(locations, rho),
                omega=cfg.b, m0=np.zeros(n_loc), M0=eye_loc,
                n0=cfg.n0, d0=cfg.d0,
            )
            try:
                state = ssm.ffbs(resid, spec, rng_bias)
            except NumericError as exc:
                raise NumericError(
                    f"bias refresh failed at iteration {it}: {exc}"
                ) from exc
            u, nu = state.theta, state.v
        else:
            nu = nu_cal

        if it >= cfg.burn_in and (it - cfg.burn_in) % cfg.thin == 0:
            # A replicate is a fresh trajectory under the fitted model:
            # a recursive emulator sample at the current input, shifted
            # by the bias states, plus observation noise.
            y_path = freerun(idx, eta, rng_rep)
            rep_std = (
                y_path
                + u[1:]
                + np.sqrt(nu[1:, None]) * rng_rep.standard_normal((t_eff, n_loc))
            )
            out_rep[slot] = (
                std.inverse_mean(rep_std, axis=-1) if std is not None else rep_std
            )
            out_eta[slot] = eta
            if cfg.bias_enabled:
                out_rho[slot] = rho
            out_u[slot] = u
            out_nu[slot] = nu
            slot += 1

    return CalibrationDraws(
        eta=out_eta,
        rho=out_rho,
        u=out_u,
        nu=out_nu,
        z_rep=out_rep,
        accept_eta=acc_eta / cfg.n_samples,
        accept_rho=acc_rho / cfg.n_samples if cfg.bias_enabled else float("nan"),
        times=ens.obs_times,
        bias_enabled=cfg.bias_enabled,
    )


def posterior_replicates(draws: CalibrationDraws):
    """Replicate mean and SD per (time, location) for scoring.

    Moments are taken across the retained replicate draws on the data
    scale; a single retained draw yields SD 0.
    """
    if draws.z_rep.shape[0] == 0:
        raise ValidationError("no retained draws to summarize")
    mu_rep = draws.z_rep.mean(axis=0)
    ddof = 1 if draws.z_rep.shape[0] > 1 else 0
    sigma_rep = draws.z_rep.std(axis=0, ddof=ddof)
    return mu_rep, sigma_rep
