"""Tests for the conjugate filter and backward sampler.

The dense-joint oracle in ``_oracles`` conditions the full Gaussian in
one shot, so the recursive filter/sampler is checked against genuinely
independent arithmetic. Distributional behaviour of the sampler is
checked with seeded Monte Carlo at fixed tolerances in standard errors.
"""

import numpy as np
import pytest
import scipy.stats

from ssgp.errors import NumericError, ValidationError
from ssgp.ssm import (
    SsmSpec,
    backward_sample,
    beta_shock,
    draw_shifted_gamma_precision,
    ffbs,
    kalman_filter,
)

from _oracles import batch_regression_posterior, dense_ng_posterior


def random_spd(rng, n, scale=1.0):
    a = rng.standard_normal((n, n))
    return scale * (a @ a.T + n * np.eye(n))


def random_model(rng, p, n_obs, n_times, omega=1.0):
    f_list = [rng.standard_normal((n_obs, p)) for _ in range(n_times)]
    g_list = [0.9 * rng.standard_normal((p, p)) / np.sqrt(p) for _ in range(n_times)]
    spec = SsmSpec(
        f=f_list,
        g=g_list,
        v=random_spd(rng, n_obs, 0.3),
        w=random_spd(rng, p, 0.5),
        omega=omega,
        m0=rng.standard_normal(p),
        M0=random_spd(rng, p, 0.8),
        n0=2.5,
        d0=1.7,
    )
    y = rng.standard_normal((n_times, n_obs))
    return spec, y, f_list, g_list


class TestSpecValidation:
    def test_rejects_omega_outside_unit_interval(self):
        for bad in (0.0, -0.2, 1.5):
            with pytest.raises(ValidationError):
                SsmSpec(v=np.eye(1), w=np.eye(1), omega=bad, m0=np.zeros(1), M0=np.eye(1))

    def test_rejects_nonpositive_gamma_prior(self):
        with pytest.raises(ValidationError):
            SsmSpec(v=np.eye(1), w=np.eye(1), m0=np.zeros(1), M0=np.eye(1), n0=0.0)

    def test_rejects_inconsistent_dimensions(self):
        with pytest.raises(ValidationError):
            SsmSpec(v=np.eye(1), w=np.eye(3), m0=np.zeros(2), M0=np.eye(2))


class TestFilter:
    def test_matches_dense_joint_oracle(self):
        rng = np.random.default_rng(7)
        for p, n_obs, n_times in [(1, 1, 4), (2, 1, 5), (1, 2, 5), (3, 2, 4)]:
            spec, y, f_list, g_list = random_model(rng, p, n_obs, n_times, omega=1.0)
            fs = kalman_filter(y, spec)
            for t in (2, n_times):
                post = dense_ng_posterior(
                    y[:t], f_list[:t], g_list[:t], spec.v, spec.w,
                    spec.m0, spec.M0, spec.n0, spec.d0,
                )
                blk = post.block(t, p)
                np.testing.assert_allclose(fs.m[t], post.mean[t], rtol=1e-8, atol=1e-8)
                np.testing.assert_allclose(
                    fs.M[t], post.cond_cov[blk, blk], rtol=1e-8, atol=1e-8
                )
                assert fs.n[t] == pytest.approx(post.n_post, rel=1e-12)
                assert fs.d[t] == pytest.approx(post.d_post, rel=1e-8)

    def test_matches_batch_regression_oracle(self):
        # Zero innovation + identity transition is Bayesian linear regression.
        rng = np.random.default_rng(11)
        p, n_obs, n_times = 3, 2, 6
        f_list = [rng.standard_normal((n_obs, p)) for _ in range(n_times)]
        spec = SsmSpec(
            f=f_list,
            g=None,
            v=random_spd(rng, n_obs, 0.4),
            w=np.zeros((p, p)),
            omega=1.0,
            m0=rng.standard_normal(p),
            M0=random_spd(rng, p),
            n0=3.0,
            d0=2.0,
        )
        y = rng.standard_normal((n_times, n_obs))
        fs = kalman_filter(y, spec)
        m_post, cov_post, n_post, d_post = batch_regression_posterior(
            y, f_list, spec.v, spec.m0, spec.M0, spec.n0, spec.d0
        )
        np.testing.assert_allclose(fs.m[n_times], m_post, rtol=1e-9, atol=1e-10)
        np.testing.assert_allclose(fs.M[n_times], cov_post, rtol=1e-9, atol=1e-10)
        assert fs.n[n_times] == pytest.approx(n_post)
        assert fs.d[n_times] == pytest.approx(d_post, rel=1e-9)

    def test_empty_series_returns_prior(self):
        spec = SsmSpec(
            f=np.ones((1, 2)), g=None, v=np.eye(1), w=np.eye(2),
            m0=np.array([0.5, -1.0]), M0=2.0 * np.eye(2), n0=4.0, d0=3.0,
        )
        fs = kalman_filter(np.zeros((0, 1)), spec)
        assert fs.n_times == 0
        np.testing.assert_array_equal(fs.m[0], spec.m0)
        np.testing.assert_array_equal(fs.M[0], spec.M0)
        assert fs.n[0] == 4.0 and fs.d[0] == 3.0

    def test_hyperparameter_recursions(self):
        rng = np.random.default_rng(3)
        spec, y, _, _ = random_model(rng, 2, 3, 6, omega=0.9)
        fs = kalman_filter(y, spec)
        for t in range(1, 7):
            assert fs.n_star[t] == pytest.approx(0.9 * fs.n[t - 1], rel=1e-13)
            assert fs.d_star[t] == pytest.approx(0.9 * fs.d[t - 1], rel=1e-13)
            assert fs.n[t] == pytest.approx(fs.n_star[t] + 1.5, rel=1e-13)
            assert fs.d[t] >= fs.d_star[t]

    def test_static_omega_terminal_dof(self):
        rng = np.random.default_rng(4)
        spec, y, _, _ = random_model(rng, 2, 2, 5, omega=1.0)
        fs = kalman_filter(y, spec)
        assert fs.n[5] == pytest.approx(spec.n0 + 0.5 * 2 * 5, rel=1e-13)

    def test_forecast_density_matches_student_t(self):
        rng = np.random.default_rng(5)
        spec, y, _, _ = random_model(rng, 2, 3, 5, omega=0.93)
        fs = kalman_filter(y, spec)
        for t in range(1, 6):
            ref = scipy.stats.multivariate_t.logpdf(
                y[t - 1],
                loc=fs.q[t],
                shape=fs.Q[t] * fs.d_star[t] / fs.n_star[t],
                df=2.0 * fs.n_star[t],
            )
            assert fs.forecast_logpdf[t] == pytest.approx(ref, abs=1e-10)

    def test_filtered_covariances_symmetric_psd(self):
        rng = np.random.default_rng(6)
        for _ in range(5):
            spec, y, _, _ = random_model(rng, 3, 2, 8, omega=0.9)
            fs = kalman_filter(y, spec)
            for t in range(9):
                np.testing.assert_allclose(fs.M[t], fs.M[t].T, atol=1e-12)
                assert np.linalg.eigvalsh(fs.M[t]).min() >= -1e-10
                assert fs.d[t] > 0.0

    def test_singular_forecast_raises(self):
        spec = SsmSpec(
            f=np.zeros((1, 1)), g=None, v=np.zeros((1, 1)), w=np.eye(1),
            m0=np.zeros(1), M0=np.eye(1),
        )
        with pytest.raises(NumericError, match="time 1"):
            kalman_filter(np.ones((1, 1)), spec)


def _mc_draws(spec, y, n_draws, seed, smoother="conditional"):
    fs = kalman_filter(y, spec)
    rng = np.random.default_rng(seed)
    thetas = np.empty((n_draws, fs.n_times + 1, spec.m0.shape[0]))
    vs = np.empty((n_draws, fs.n_times + 1))
    for i in range(n_draws):
        draw = backward_sample(fs, spec, rng, smoother=smoother)
        thetas[i] = draw.theta
        vs[i] = draw.v
    return fs, thetas, vs


def _scalar_chain():
    spec = SsmSpec(
        f=[np.array([[1.0]]), np.array([[0.6]]), np.array([[1.3]])],
        g=np.array([[0.8]]),
        v=np.array([[0.4]]),
        w=np.array([[0.5]]),
        omega=1.0,
        m0=np.array([0.3]),
        M0=np.array([[1.2]]),
        n0=3.0,
        d0=2.0,
    )
    y = np.array([[0.7], [-0.4], [1.1]])
    post = dense_ng_posterior(
        y, [spec.f_at(t) for t in (1, 2, 3)], [spec.g_at(t) for t in (1, 2, 3)],
        spec.v, spec.w, spec.m0, spec.M0, spec.n0, spec.d0,
    )
    return spec, y, post


class TestBackwardSampler:
    def test_terminal_draws_match_normal_gamma(self):
        rng = np.random.default_rng(20)
        spec, y, _, _ = random_model(rng, 1, 1, 4, omega=0.9)
        fs, thetas, vs = _mc_draws(spec, y, 20000, seed=21)
        t_end = fs.n_times
        prec = 1.0 / vs[:, t_end]
        ks_v = scipy.stats.kstest(
            prec, scipy.stats.gamma(a=fs.n[t_end], scale=1.0 / fs.d[t_end]).cdf
        )
        assert ks_v.pvalue > 1e-3
        scale = np.sqrt(fs.M[t_end, 0, 0] * fs.d[t_end] / fs.n[t_end])
        u = (thetas[:, t_end, 0] - fs.m[t_end, 0]) / scale
        ks_t = scipy.stats.kstest(u, scipy.stats.t(df=2.0 * fs.n[t_end]).cdf)
        assert ks_t.pvalue > 1e-3

    def test_joint_moments_match_dense_oracle(self):
        spec, y, post = _scalar_chain()
        n_draws = 25000
        _, thetas, vs = _mc_draws(spec, y, n_draws, seed=22)
        marg = post.marginal_cov()
        dof = 2.0 * post.n_post
        excess = 6.0 / (dof - 4.0)
        for t in range(4):
            var_t = marg[t, t]
            se_mean = np.sqrt(var_t / n_draws)
            assert abs(thetas[:, t, 0].mean() - post.mean[t, 0]) < 4.0 * se_mean
            se_var = var_t * np.sqrt((2.0 + excess) / n_draws)
            assert abs(thetas[:, t, 0].var() - var_t) < 4.0 * se_var
        # Cross-time dependence of the joint draw.
        c12 = np.cov(thetas[:, 1, 0], thetas[:, 2, 0])[0, 1]
        se_c = np.sqrt((marg[1, 1] * marg[2, 2] + marg[1, 2] ** 2) / n_draws) * (
            1.0 + 0.5 * excess
        )
        assert abs(c12 - marg[1, 2]) < 5.0 * se_c
        # Variance draws follow the terminal inverse-Gamma.
        ev = post.d_post / (post.n_post - 1.0)
        var_v = post.d_post**2 / ((post.n_post - 1.0) ** 2 * (post.n_post - 2.0))
        assert abs(vs[:, 3].mean() - ev) < 4.0 * np.sqrt(var_v / n_draws)

    def test_literal_smoother_marginals(self):
        # The alternative recursion reproduces smoothed means and per-time
        # variances but drops cross-time coupling from the draw.
        spec, y, post = _scalar_chain()
        n_draws = 25000
        _, thetas, _ = _mc_draws(spec, y, n_draws, seed=23, smoother="literal")
        marg = post.marginal_cov()
        dof = 2.0 * post.n_post
        excess = 6.0 / (dof - 4.0)
        for t in range(4):
            var_t = marg[t, t]
            assert abs(thetas[:, t, 0].mean() - post.mean[t, 0]) < 4.0 * np.sqrt(
                var_t / n_draws
            )
            assert abs(thetas[:, t, 0].var() - var_t) < 4.0 * var_t * np.sqrt(
                (2.0 + excess) / n_draws
            )
        c12 = np.cov(thetas[:, 1, 0], thetas[:, 2, 0])[0, 1]
        se_c = np.sqrt((marg[1, 1] * marg[2, 2]) / n_draws) * (1.0 + 0.5 * excess)
        assert c12 < marg[1, 2] - 5.0 * se_c

    def test_static_omega_gives_constant_variance_path(self):
        rng = np.random.default_rng(24)
        spec, y, _, _ = random_model(rng, 2, 1, 6, omega=1.0)
        fs = kalman_filter(y, spec)
        gen = np.random.default_rng(25)
        for _ in range(10):
            draw = backward_sample(fs, spec, gen)
            np.testing.assert_allclose(draw.v, draw.v[0], rtol=1e-13)

    def test_zero_innovation_gives_constant_state_path(self):
        rng = np.random.default_rng(26)
        p = 2
        spec = SsmSpec(
            f=[rng.standard_normal((1, p)) for _ in range(5)],
            g=None,
            v=np.eye(1),
            w=np.zeros((p, p)),
            omega=1.0,
            m0=rng.standard_normal(p),
            M0=random_spd(rng, p),
        )
        y = rng.standard_normal((5, 1))
        draw = ffbs(y, spec, np.random.default_rng(27))
        for t in range(5):
            np.testing.assert_allclose(draw.theta[t], draw.theta[5], atol=1e-10)

    def test_degenerate_zero_state_stays_zero(self):
        # Zero prior mass and zero innovation pin the trajectory at zero;
        # the variance chain still updates from the data.
        spec = SsmSpec(
            f=np.ones((1, 1)), g=None, v=np.eye(1), w=np.zeros((1, 1)),
            omega=0.95, m0=np.zeros(1), M0=np.zeros((1, 1)),
        )
        y = np.array([[0.4], [-0.2], [0.9]])
        draw = ffbs(y, spec, np.random.default_rng(28))
        np.testing.assert_array_equal(draw.theta, np.zeros((4, 1)))
        assert np.all(np.isfinite(draw.v)) and np.all(draw.v > 0.0)

    def test_seed_determinism_and_ffbs_equivalence(self):
        rng = np.random.default_rng(29)
        spec, y, _, _ = random_model(rng, 2, 2, 5, omega=0.92)
        d1 = ffbs(y, spec, np.random.default_rng(123))
        d2 = ffbs(y, spec, np.random.default_rng(123))
        np.testing.assert_array_equal(d1.theta, d2.theta)
        np.testing.assert_array_equal(d1.v, d2.v)
        fs = kalman_filter(y, spec)
        d3 = backward_sample(fs, spec, np.random.default_rng(123))
        np.testing.assert_array_equal(d1.theta, d3.theta)

    def test_rejects_unknown_smoother(self):
        rng = np.random.default_rng(30)
        spec, y, _, _ = random_model(rng, 1, 1, 2)
        fs = kalman_filter(y, spec)
        with pytest.raises(ValidationError):
            backward_sample(fs, spec, np.random.default_rng(0), smoother="rts")


class TestPrecisionHelpers:
    def test_shifted_gamma_matches_scipy(self):
        rng = np.random.default_rng(40)
        draws = draw_shifted_gamma_precision(2.3, 1.7, 0.9, rng, size=100000)
        ref = scipy.stats.gamma(a=2.3, loc=0.9, scale=1.0 / 1.7)
        assert scipy.stats.kstest(draws, ref.cdf).pvalue > 1e-3
        assert draws.min() > 0.9

    def test_shifted_gamma_zero_shape_is_point_mass(self):
        rng = np.random.default_rng(41)
        assert draw_shifted_gamma_precision(0.0, 1.0, 2.5, rng) == 2.5
        np.testing.assert_array_equal(
            draw_shifted_gamma_precision(0.0, 1.0, 2.5, rng, size=4), np.full(4, 2.5)
        )

    def test_beta_shock_unit_mean(self):
        omega, n, n_draws = 0.9, 7.0, 1000000
        rng = np.random.default_rng(42)
        shocks = beta_shock(n, omega, rng, size=n_draws)
        se = np.sqrt((1.0 - omega) / (omega * (n + 1.0)) / n_draws)
        assert abs(shocks.mean() - 1.0) < 3.0 * se

    def test_beta_shock_static_omega_is_one(self):
        rng = np.random.default_rng(43)
        assert beta_shock(5.0, 1.0, rng) == 1.0
        np.testing.assert_array_equal(beta_shock(5.0, 1.0, rng, size=3), np.ones(3))

    def test_beta_shock_rejects_bad_omega(self):
        with pytest.raises(ValidationError):
            beta_shock(5.0, 0.0, np.random.default_rng(0))
