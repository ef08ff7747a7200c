import math

import numpy as np
import pytest

import psetkf.harness as harness
from psetkf.errors import DimensionMismatch, GridTooCoarse
from psetkf.harness import (ExperimentConfig, MetricsAccumulator, identity_battery, run_experiment,
                            run_trials, silent_posterior_on_grid, sweep_rate_bounds,
                            verify_posterior, worker_count)
from psetkf.matgauss import GaussianBelief
from psetkf.model import LtiSystem, target_tracking_scenario
from psetkf.pset import TriggerConfig, evaluate_trigger, inject_correction_sign_flip
from psetkf.streams import trial_inputs

UNIT = LtiSystem([[1.0]], [[1.0]], [[1.0]], [[1.0]], GaussianBelief([0.0], [[2.0]]))


def small_config(**kw):
    base = dict(scenario="target_tracking", c_grid=(2.3, 12.0), trials=12, horizon=25, seed=5)
    base.update(kw)
    return ExperimentConfig(**base)


class TestExperimentConfig:
    @pytest.mark.parametrize("kw", [dict(trials=0), dict(horizon=0), dict(c_grid=()),
                                    dict(c_grid=(1.0, -2.0)), dict(estimators=("pset", "ukf")),
                                    dict(estimators=()), dict(scenario="pendulum")])
    def test_invalid(self, kw):
        with pytest.raises(ValueError):
            small_config(**kw)

    def test_custom_builder(self):
        cfg = small_config(scenario="custom",
                           builder=lambda c: (UNIT, TriggerConfig([[c]])))
        sys_, trig = cfg.build(3.0)
        assert sys_ is UNIT and trig.gamma[0, 0] == 3.0


class TestMetrics:
    def test_definitions(self):
        cfg = small_config()
        res = run_experiment(cfg, keep_batches=True)
        for key, m in res.metrics.items():
            b = res.batches[key]
            K = cfg.horizon
            e = [sum(math.sqrt(b.sq_err[:, j].mean()) for j in range(k)) / k
                 for k in range(1, K + 1)]
            t = [sum(b.post_trace[:, j].mean() for j in range(k)) / k for k in range(1, K + 1)]
            assert np.allclose(m.E_k, e, rtol=1e-12)
            assert np.allclose(m.T_k, t, rtol=1e-12)
            assert m.rate == pytest.approx(b.sends.mean(), abs=1e-15)
            assert np.all(np.isfinite(m.E_k)) and np.all(m.E_k >= 0)

    def test_kf_rate_is_one(self):
        res = run_experiment(small_config(estimators=("kf",)))
        assert all(m.rate == 1.0 for m in res.metrics.values())

    def test_random_is_rate_matched(self):
        res = run_experiment(small_config(trials=60, horizon=100, estimators=("pset", "random")))
        for c in (2.3, 12.0):
            assert abs(res.metrics[("random", c)].rate - res.metrics[("pset", c)].rate) < 0.03

    def test_single_step_hand_recursion(self):
        cfg = ExperimentConfig("custom", (1.0,), 1, 1, seed=8, estimators=("kf",),
                               builder=lambda c: (UNIT, TriggerConfig([[c]])))
        m = run_experiment(cfg).metrics[("kf", 1.0)]
        inp = trial_inputs(UNIT, 1, 1, 8)
        prior_var = 2.0 + 1.0
        gain = prior_var / (prior_var + 1.0)
        estimate = 0.0 + gain * (inp.measurements[0, 0, 0] - 0.0)
        assert m.E_k[0] == pytest.approx(abs(inp.states[0, 0, 0] - estimate), rel=1e-12)
        assert m.T_k[0] == pytest.approx((1 - gain) * prior_var, rel=1e-12)

    def test_deterministic_across_threads_and_chunks(self, monkeypatch):
        cfg = small_config()
        a = run_experiment(cfg, threads=1)
        monkeypatch.setattr(harness, "CHUNK_TRIALS", 5)
        b = run_experiment(cfg, threads=3)
        for key in a.metrics:
            for name in ("E_k", "T_k", "mse_k", "trace_k"):
                assert np.array_equal(getattr(a.metrics[key], name), getattr(b.metrics[key], name))
            assert a.metrics[key].rate == b.metrics[key].rate

    def test_common_trajectories(self):
        sys_, cfg = target_tracking_scenario(1e-9)
        quiet = run_trials(sys_, "pset", 4, 10, 2, cfg)
        silent = run_trials(sys_, "random", 4, 10, 2, send_prob=0.0)
        # with essentially no sends both estimators predict blindly on the same paths
        assert quiet.sends.sum() == 0
        assert np.allclose(quiet.sq_err, silent.sq_err, rtol=1e-6)

    def test_worker_count(self, monkeypatch):
        monkeypatch.setenv("PSET_THREADS", "3")
        assert worker_count() == 3
        assert worker_count(0) == 1


class TestGridOracle:
    def test_matches_closed_form(self):
        rep = verify_posterior(UNIT, TriggerConfig([[1.0]]), steps=10)
        assert len(rep.checks) == 10
        assert rep.max_mean_dev <= 1e-6
        assert rep.max_rel_var_dev <= 1e-4
        assert rep.max_prob_dev <= 1e-6

    def test_worked_prior(self):
        cfg = TriggerConfig([[1.0]])
        mean, var, norm = silent_posterior_on_grid(0.0, 2.0, UNIT, cfg)
        ev = evaluate_trigger(GaussianBelief([0.0], [[2.0]]), [0.0], UNIT, cfg, 0.5)
        assert abs(mean) <= 1e-6
        assert var == pytest.approx(26 / 21, rel=1e-4)
        assert var == pytest.approx(ev.p0.cov[0, 0], rel=1e-4)
        assert 0 < norm < 1

    def test_vanishing_weight_is_uninformative(self):
        mean, var, norm = silent_posterior_on_grid(1.0, 2.0, UNIT, TriggerConfig([[1e-10]]))
        assert mean == pytest.approx(1.0, abs=1e-6)
        assert var == pytest.approx(2.0, rel=1e-6)
        assert norm == pytest.approx(1.0, abs=1e-8)

    def test_detects_fault(self):
        with inject_correction_sign_flip():
            rep = verify_posterior(UNIT, TriggerConfig([[1.0]]), steps=3)
        assert rep.max_rel_var_dev > 1e-2

    def test_grid_requirements(self):
        with pytest.raises(GridTooCoarse):
            silent_posterior_on_grid(0.0, 1.0, UNIT, TriggerConfig([[1.0]]), grid_points=500)
        with pytest.raises(GridTooCoarse):
            silent_posterior_on_grid(0.0, 1.0, UNIT, TriggerConfig([[1.0]]), width=4.0)
        sys_, cfg = target_tracking_scenario(1.0)
        with pytest.raises(DimensionMismatch):
            silent_posterior_on_grid(0.0, 1.0, sys_, cfg)


class TestIdentityBattery:
    def test_passes(self):
        for check in identity_battery(200, seed=3):
            assert check.passed, check
            assert check.instances == 200

    def test_fault_is_caught(self):
        with inject_correction_sign_flip():
            results = {c.name: c.passed for c in identity_battery(20)}
        assert not all(results.values())


class TestSweep:
    def test_rows(self):
        rows = sweep_rate_bounds("target_tracking", [1e-3, 12.0, 1e4], trials=40, horizon=300)
        for row in rows:
            assert row.rate_lower - 0.02 <= row.empirical_rate <= row.rate_upper + 0.02
        assert rows[0].empirical_rate < 0.05
        assert rows[1].empirical_rate == pytest.approx(0.5, abs=0.05)
        assert rows[2].empirical_rate > 0.95
        assert rows[0].trace_p_lower == pytest.approx(rows[2].trace_p_lower)
