import math
import warnings

import numpy as np
import pytest
from scipy.integrate import quad_vec

from psetkf.errors import DimensionMismatch, NonPositiveScale, NotPositiveDefinite
from psetkf.matgauss import GaussianBelief
from psetkf.model import (DetectabilityWarning, LtiSystem, Trajectory, is_detectable, scenario,
                          simulate, spring_mass_continuous, spring_mass_scenario,
                          spring_mass_system, target_tracking_scenario, zoh_discretize)


def taylor_expm(m, terms=20):
    out, term = np.eye(m.shape[0]), np.eye(m.shape[0])
    for j in range(1, terms + 1):
        term = term @ m / j
        out = out + term
    return out


def scalar_system(a=1.0, c=1.0, q=1.0, r=1.0, p0=1.0, **kw):
    return LtiSystem([[a]], [[c]], [[q]], [[r]], GaussianBelief([0.0], [[p0]]), **kw)


class TestLtiSystem:
    def test_dimension_checks(self):
        with pytest.raises(DimensionMismatch):
            LtiSystem(np.eye(2), np.ones((1, 3)), np.eye(2), np.eye(1),
                      GaussianBelief(np.zeros(2), np.eye(2)))
        with pytest.raises(DimensionMismatch):
            LtiSystem(np.eye(2), np.ones((1, 2)), np.eye(3), np.eye(1),
                      GaussianBelief(np.zeros(2), np.eye(2)))

    def test_requires_positive_noise(self):
        with pytest.raises(NotPositiveDefinite):
            scalar_system(q=0.0)
        scalar_system(q=0.0, r=0.0, p0=0.0, allow_singular=True)

    def test_undetectable_warns(self):
        with pytest.warns(DetectabilityWarning):
            LtiSystem(np.diag([2.0, 0.5]), [[0.0, 1.0]], np.eye(2), [[1.0]],
                      GaussianBelief(np.zeros(2), np.eye(2)))

    def test_detectable_quiet(self):
        with warnings.catch_warnings():
            warnings.simplefilter("error")
            scalar_system(a=2.0)

    def test_pbh(self):
        assert is_detectable(np.diag([0.5, 0.2]), np.zeros((1, 2)))
        assert not is_detectable(np.eye(2), np.array([[1.0, 0.0]]))

    def test_full_row_rank(self):
        sys_ = LtiSystem(0.5 * np.eye(2), [[1.0, 0.0], [2.0, 0.0]], np.eye(2), np.eye(2),
                         GaussianBelief(np.zeros(2), np.eye(2)))
        assert not sys_.c_full_row_rank()


class TestSimulate:
    def test_noise_free_recursion(self):
        A = np.array([[0.9, 0.2], [-0.1, 0.95]])
        x0 = np.array([1.0, -2.0])
        sys_ = LtiSystem(A, [[1.0, 0.0]], np.zeros((2, 2)), [[0.0]],
                         GaussianBelief(x0, np.zeros((2, 2))), allow_singular=True)
        traj = simulate(sys_, 20, np.random.default_rng(0))
        for k in range(20):
            assert np.allclose(traj.states[k], np.linalg.matrix_power(A, k + 1) @ x0,
                               rtol=1e-12, atol=1e-14)
        assert np.allclose(traj.measurements[:, 0], traj.states[:, 0])

    def test_random_walk_increment_variance(self):
        traj = simulate(scalar_system(), 100_000, np.random.default_rng(1))
        inc = np.diff(np.concatenate([traj.initial_state, traj.states[:, 0]]))
        assert abs(inc.var() - 1.0) < 0.02

    def test_residual_covariances(self):
        sys_ = spring_mass_system()
        traj = simulate(sys_, 100_000, np.random.default_rng(2))
        x = np.vstack([traj.initial_state, traj.states])
        w = x[1:] - x[:-1] @ sys_.A.T
        v = traj.measurements - traj.states @ sys_.C.T
        for res, ref in ((w, sys_.Q), (v, sys_.R)):
            err = np.linalg.norm(np.cov(res.T) - ref) / np.linalg.norm(ref)
            assert err < 0.03

    def test_same_seed_same_trajectory(self):
        sys_, _ = target_tracking_scenario(1.0)
        a = simulate(sys_, 50, np.random.default_rng(5))
        b = simulate(sys_, 50, np.random.default_rng(5))
        assert np.array_equal(a.states, b.states)
        assert np.array_equal(a.measurements, b.measurements)

    def test_horizon_validated(self):
        with pytest.raises(ValueError):
            simulate(scalar_system(), 0, np.random.default_rng(0))

    def test_trajectory_lengths(self):
        with pytest.raises(DimensionMismatch):
            Trajectory(np.zeros(1), np.zeros((3, 1)), np.zeros((2, 1)))


class TestTargetTracking:
    def test_gamma_scaling(self):
        _, cfg = target_tracking_scenario(1.0)
        assert np.array_equal(cfg.gamma, np.diag([4.0, 1.0, 1.0]))
        _, cfg = target_tracking_scenario(12.0)
        assert np.allclose(cfg.gamma, np.diag([48.0, 12.0, 12.0]))

    def test_matrices(self):
        sys_, _ = target_tracking_scenario(1.0)
        assert np.allclose(sys_.A, [[1, 0.25, 0.0625], [0, 1, 0.25], [0, 0, 1]])
        assert np.allclose(sys_.C, [[1, 0, 0], [0, 0, 1]])
        assert np.allclose(sys_.R, np.diag([1.0, 0.01]))
        assert max(abs(np.linalg.eigvals(sys_.A))) == pytest.approx(1.0)
        assert sys_.c_full_row_rank()

    def test_process_noise_hand_values(self):
        # 2 a σ_m² = 0.1 times the polynomial entries at T = 1/4
        expected = 0.1 * np.array([
            [1 / 20480, 1 / 2048, 1 / 384],
            [1 / 2048, 1 / 192, 1 / 32],
            [1 / 384, 1 / 32, 1 / 4],
        ])
        sys_, _ = target_tracking_scenario(3.0)
        assert np.allclose(sys_.Q, expected, rtol=1e-14, atol=0)

    @pytest.mark.parametrize("c", [0.0, -1.0])
    def test_nonpositive_scale(self, c):
        with pytest.raises(NonPositiveScale):
            target_tracking_scenario(c)


class TestSpringMass:
    def test_gamma_identity(self):
        _, cfg = spring_mass_scenario(1.0)
        assert np.array_equal(cfg.gamma, np.eye(4))

    def test_transition_matches_taylor(self):
        Ac, _ = spring_mass_continuous()
        sys_ = spring_mass_system()
        ref = taylor_expm(Ac * 0.02)
        assert np.linalg.norm(sys_.A - ref) <= 1e-9 * np.linalg.norm(ref)

    def test_noise_matches_quadrature(self):
        Ac, Qc = spring_mass_continuous()
        ref, _ = quad_vec(lambda t: taylor_expm(Ac * t) @ Qc @ taylor_expm(Ac * t).T,
                          0.0, 0.02, epsabs=1e-16, epsrel=1e-12)
        sys_ = spring_mass_system()
        assert np.linalg.norm(sys_.Q - ref) <= 1e-9 * np.linalg.norm(ref)
        assert np.linalg.eigvalsh(sys_.Q)[0] > 0

    def test_zoh_scalar(self):
        a, q, dt = -0.7, 2.0, 0.3
        Ad, Qd = zoh_discretize(np.array([[a]]), np.array([[q]]), dt)
        assert Ad[0, 0] == pytest.approx(math.exp(a * dt), rel=1e-13)
        assert Qd[0, 0] == pytest.approx(q * (math.exp(2 * a * dt) - 1) / (2 * a), rel=1e-12)

    def test_measurement_model(self):
        sys_ = spring_mass_system()
        assert np.allclose(sys_.C, [[1, 0, 0, 0], [0, 0.5, 0, 0]])
        assert np.allclose(sys_.R, np.diag([0.25, 0.01]))


def test_scenario_lookup():
    sys_, cfg = scenario("spring_mass", 2.0)
    assert np.allclose(cfg.gamma, 2.0 * np.eye(4))
    with pytest.raises(ValueError, match="unknown scenario"):
        scenario("pendulum", 1.0)
