"""Tests for the ready-made simulation studies.

Covers experiment construction and validation, design/ensemble wiring,
graph generation, held-out field sampling, worker-count invariance of
ensemble simulation, and the fit-and-score pipeline helper.
"""

import numpy as np
import pytest

from ssgp.calibrator import CalibConfig
from ssgp.design import latin_hypercube
from ssgp.emulator import EmulatorConfig
from ssgp.errors import NumericError, ValidationError
from ssgp.experiments import (
    EXPERIMENT_KINDS,
    FieldSample,
    LvExperiment,
    NetworkExperiment,
    SirPdeExperiment,
    fit_and_score,
    make_experiment,
    random_connected_graph,
    sample_field,
    simulate_ensemble,
    training_design,
)


class TestLvExperiment:
    def test_run_shape_and_scale(self):
        exp = LvExperiment()
        raw = np.array([1.0, 0.05, 1.0, 0.05])
        out = exp.run(raw)
        n_expected = exp.n_steps // exp.observe_every + 1
        assert out.shape == (n_expected, 2)
        assert np.all(np.isfinite(out))
        linear = LvExperiment(log_output=False).run(raw)
        np.testing.assert_allclose(np.exp(out), linear, rtol=1e-12)

    def test_trajectories_cycle(self):
        """Both populations must rise and fall within the horizon, so
        the ensemble carries phase information rather than monotone
        growth."""
        exp = LvExperiment()
        out = exp.run(np.array([1.0, 0.05, 1.0, 0.05]))
        for j in (0, 1):
            diffs = np.diff(out[:, j])
            assert np.any(diffs > 0) and np.any(diffs < 0)

    def test_locations_are_two_series(self):
        assert LvExperiment().locations.shape == (2, 1)

    def test_field_params_stay_in_interior_band(self):
        exp = LvExperiment()
        lo = np.array([b[0] for b in exp.bounds])
        hi = np.array([b[1] for b in exp.bounds])
        for seed in range(40):
            raw = exp.sample_field_params(np.random.default_rng(seed))
            unit = (raw - lo) / (hi - lo)
            assert np.all(unit >= 0.15) and np.all(unit <= 0.85)

    def test_invalid_bounds_rejected(self):
        with pytest.raises(ValidationError):
            LvExperiment(bounds=((0.5, 1.5), (0.1, 0.02), (0.5, 1.5),
                                 (0.02, 0.1)))
        with pytest.raises(ValidationError):
            LvExperiment(bounds=((0.5, 1.5),))


class TestSirPdeExperiment:
    def test_run_shape_matches_grid(self):
        exp = SirPdeExperiment(n_side=6, n_steps=20, observe_every=4)
        out = exp.run(np.array([1.5, 0.5, 0.4]))
        # Rows cover the initial state plus every fourth step.
        assert out.shape == (6, 36)
        assert np.all(out >= 0.0)

    def test_locations_fill_unit_square(self):
        exp = SirPdeExperiment(n_side=4, n_steps=8, observe_every=4)
        locs = exp.locations
        assert locs.shape == (16, 2)
        assert locs.min() == 0.0 and locs.max() == 1.0
        # row-major: second coordinate varies fastest
        np.testing.assert_allclose(locs[1] - locs[0], [0.0, 1.0 / 3.0])

    def test_unstable_diffusion_rejected(self):
        with pytest.raises(ValidationError):
            SirPdeExperiment(dt=0.3, bounds=((1.0, 2.2), (0.3, 0.8),
                                             (0.2, 1.0)))

    def test_epidemic_rises_above_seed_level(self):
        exp = SirPdeExperiment()
        out = exp.run(np.array([1.8, 0.4, 0.4]))
        seed_level = exp.n_pop * exp.seed_fraction
        assert out.max() > 4.0 * seed_level


class TestNetworkExperiment:
    def test_run_shape_and_conservation(self):
        exp = NetworkExperiment()
        out = exp.run(np.array([0.5, 0.0]))
        assert out.shape == (exp.n_steps + 1, exp.n_nodes)
        np.testing.assert_allclose(out.sum(axis=1), exp.x0_total, rtol=1e-12)

    def test_graph_is_connected_and_fixed(self):
        a = NetworkExperiment().adjacency
        b = NetworkExperiment().adjacency
        np.testing.assert_array_equal(a, b)
        np.testing.assert_array_equal(a, a.T)
        assert np.all(np.diag(a) == 0)

    def test_locations_none_uses_adjacency(self):
        exp = NetworkExperiment()
        assert exp.locations is None
        ens = simulate_ensemble(exp, training_design(exp, 6, seed=0), p=1)
        assert ens.locations is None
        assert ens.adjacency is not None

    def test_bounds_must_lie_in_unit_interval(self):
        with pytest.raises(ValidationError):
            NetworkExperiment(bounds=((0.2, 1.4), (0.01, 0.3)))


class TestRandomConnectedGraph:
    def test_connected_symmetric_hollow(self):
        for seed in range(6):
            adj = random_connected_graph(12, 0.2, seed=seed)
            np.testing.assert_array_equal(adj, adj.T)
            assert np.all(np.diag(adj) == 0)
            # BFS from node 0 must reach every node
            seen = {0}
            frontier = [0]
            while frontier:
                nxt = []
                for i in frontier:
                    for j in np.flatnonzero(adj[i]):
                        if j not in seen:
                            seen.add(int(j))
                            nxt.append(int(j))
                frontier = nxt
            assert len(seen) == 12

    def test_degenerate_edge_prob_rejected(self):
        with pytest.raises(ValidationError):
            random_connected_graph(30, 0.0, seed=0)

    def test_unreachable_connectivity_raises(self):
        # 30 nodes need >= 29 edges; at edge_prob 0.01 a draw has ~4.
        with pytest.raises(NumericError):
            random_connected_graph(30, 0.01, seed=0, max_tries=3)


class TestMakeExperiment:
    def test_round_trips_each_kind(self):
        assert set(EXPERIMENT_KINDS) == {"lv", "sir_pde", "network"}
        exp = make_experiment("lv", noise_sd=0.2)
        assert isinstance(exp, LvExperiment) and exp.noise_sd == 0.2
        exp = make_experiment("network", n_nodes=10, graph_seed=3)
        assert isinstance(exp, NetworkExperiment) and exp.n_nodes == 10

    def test_unknown_kind_and_setting_rejected(self):
        with pytest.raises(ValidationError):
            make_experiment("heat_equation")
        with pytest.raises(ValidationError):
            make_experiment("lv", nois_sd=0.2)

    def test_bounds_coerced_to_tuples(self):
        exp = make_experiment("lv", bounds=[[0.5, 1.5], [0.02, 0.1],
                                            [0.5, 1.5], [0.02, 0.1]])
        assert exp.bounds == ((0.5, 1.5), (0.02, 0.1), (0.5, 1.5),
                              (0.02, 0.1))


class TestSimulateEnsemble:
    def test_ensemble_matches_direct_runs(self):
        exp = LvExperiment()
        des = training_design(exp, 5, seed=3)
        ens = simulate_ensemble(exp, des, p=1)
        raw = des.to_raw()
        for i in (0, 4):
            run_std = ens.standardizer.transform(exp.run(raw[i]), axis=1)
            np.testing.assert_allclose(ens.y[:, :, i], run_std, rtol=1e-12)

    def test_workers_do_not_change_results(self):
        exp = LvExperiment()
        des = training_design(exp, 6, seed=4)
        a = simulate_ensemble(exp, des, p=1, workers=1)
        b = simulate_ensemble(exp, des, p=1, workers=2)
        np.testing.assert_array_equal(a.y, b.y)

    def test_dimension_mismatch_rejected(self):
        exp = LvExperiment()
        bad = latin_hypercube(5, 2, seed=0, bounds=exp.bounds[:2])
        with pytest.raises(ValidationError):
            simulate_ensemble(exp, bad, p=1)


class TestSampleField:
    def test_truth_plus_noise_and_eta_mapping(self):
        exp = LvExperiment(noise_sd=0.05)
        des = training_design(exp, 8, seed=5)
        fs = sample_field(exp, des, seed=11)
        assert isinstance(fs, FieldSample)
        lo = np.array([b[0] for b in exp.bounds])
        hi = np.array([b[1] for b in exp.bounds])
        np.testing.assert_allclose(lo + fs.eta * (hi - lo), fs.raw_params,
                                   rtol=1e-12)
        np.testing.assert_allclose(fs.truth, exp.run(fs.raw_params),
                                   rtol=1e-12)
        resid = fs.data.z - fs.truth
        assert 0.01 < resid.std() < 0.15
        assert fs.noise_sd == 0.05

    def test_noise_override(self):
        exp = LvExperiment()
        des = training_design(exp, 8, seed=5)
        fs = sample_field(exp, des, seed=11, noise_sd=0.0)
        np.testing.assert_array_equal(fs.data.z, fs.truth)
        assert fs.noise_sd == 0.0

    def test_seed_determinism(self):
        exp = LvExperiment()
        des = training_design(exp, 8, seed=5)
        a = sample_field(exp, des, seed=12)
        b = sample_field(exp, des, seed=12)
        np.testing.assert_array_equal(a.data.z, b.data.z)
        np.testing.assert_array_equal(a.eta, b.eta)

    def test_design_collision_rejected(self):
        exp = LvExperiment()
        des = training_design(exp, 8, seed=5)

        class Collider(LvExperiment):
            def sample_field_params(self, rng):
                return des.to_raw()[3]

        with pytest.raises(ValidationError):
            sample_field(Collider(), des, seed=1)


class TestFitAndScore:
    def test_pipeline_smoke_and_report_fields(self):
        exp = LvExperiment()
        des = training_design(exp, 10, seed=6)
        ens = simulate_ensemble(exp, des, p=1)
        fs = sample_field(exp, des, seed=7)
        ecfg = EmulatorConfig(n_samples=40, burn_in=10, thin=3, seed=1)
        ccfg = CalibConfig(n_samples=12, burn_in=4, thin=2, seed=2,
                           bias_enabled=False)
        with pytest.warns(RuntimeWarning, match="exhausted"):
            run = fit_and_score(ens, fs, ecfg, ccfg, label="smoke")
        assert run.score.model == "smoke"
        assert run.score.n_model_runs == 10
        assert np.isfinite(run.score.grs) and run.score.rmse >= 0.0
        t_eff = ens.n_times - ens.p
        assert run.mu_rep.shape == (t_eff, 2)
        assert run.sigma_rep.shape == (t_eff, 2)
        assert run.calibration.eta.shape[1] == 4
