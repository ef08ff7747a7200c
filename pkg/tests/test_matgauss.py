import numpy as np
import pytest
import scipy.linalg

from psetkf.errors import CholeskyFailure, DimensionMismatch, NotPositiveDefinite, NotSymmetric
from psetkf.matgauss import (GaussianBelief, as_psd, as_spd, cross_sqrt_trace, gaussian_factor,
                             psd_sqrt, sample_gaussian, spd_sqrt, wasserstein_sq)

from conftest import random_spd


class TestValidation:
    def test_spd_accepts_and_symmetrizes(self):
        m = np.array([[2.0, 1.0], [1.0 + 1e-12, 2.0]])
        out = as_spd(m)
        assert np.array_equal(out, out.T)

    def test_asymmetric_rejected(self):
        with pytest.raises(NotSymmetric):
            as_spd([[1.0, 0.5], [0.0, 1.0]])

    def test_indefinite_rejected(self):
        with pytest.raises(NotPositiveDefinite):
            as_spd([[1.0, 2.0], [2.0, 1.0]])

    def test_singular_rejected_as_spd_but_accepted_as_psd(self):
        m = np.array([[1.0, 1.0], [1.0, 1.0]])
        with pytest.raises(NotPositiveDefinite):
            as_spd(m)
        assert np.allclose(as_psd(m), m)

    def test_psd_tolerance(self):
        as_psd(np.diag([1.0, -1e-13]))
        with pytest.raises(NotPositiveDefinite):
            as_psd(np.diag([1.0, -1e-10]))

    def test_non_square(self):
        with pytest.raises(DimensionMismatch):
            as_spd(np.ones((2, 3)))


class TestSqrt:
    def test_identity(self):
        assert np.allclose(spd_sqrt(np.eye(3)), np.eye(3))

    def test_diagonal(self):
        assert np.allclose(spd_sqrt(np.diag([4.0, 9.0])), np.diag([2.0, 3.0]))

    def test_matches_schur_sqrtm(self, rng):
        for n in (2, 3, 5, 8):
            m = random_spd(rng, n)
            root = spd_sqrt(m)
            assert np.allclose(root, scipy.linalg.sqrtm(m).real, rtol=1e-10, atol=1e-12)
            assert np.linalg.norm(root @ root - m) <= 1e-9 * np.linalg.norm(m)
            assert np.linalg.eigvalsh(root)[0] > 0

    def test_batched(self, rng):
        batch = np.stack([random_spd(rng, 3) for _ in range(4)])
        roots = psd_sqrt(batch)
        for m, r in zip(batch, roots):
            assert np.allclose(r, spd_sqrt(m))

    def test_clamps_roundoff_negatives(self):
        m = np.diag([4.0, -1e-14])
        assert np.allclose(psd_sqrt(m), np.diag([2.0, 0.0]))


class TestCrossSqrtTrace:
    def test_matches_nonsymmetric_sqrtm(self, rng):
        # trace of the principal root of the non-symmetric product
        for n in (1, 2, 4):
            px, py, g = (random_spd(rng, n) for _ in range(3))
            s = spd_sqrt(g)
            ref = np.trace(scipy.linalg.sqrtm(s @ px @ g @ py @ s)).real
            assert cross_sqrt_trace(px, py, s) == pytest.approx(ref, rel=1e-9)


class TestBelief:
    def test_dimension_mismatch(self):
        with pytest.raises(DimensionMismatch):
            GaussianBelief([0.0, 0.0], np.eye(3))

    def test_indefinite_cov(self):
        with pytest.raises(NotPositiveDefinite):
            GaussianBelief([0.0, 0.0], [[1.0, 2.0], [2.0, 1.0]])

    def test_coerces_scalars(self):
        b = GaussianBelief(0.0, 2.0)
        assert b.dim == 1 and b.cov.shape == (1, 1)


class TestWasserstein:
    def test_identical_is_zero(self, rng):
        p = random_spd(rng, 3)
        x = GaussianBelief(np.ones(3), p)
        assert wasserstein_sq(x, x, np.eye(3)) == pytest.approx(0.0, abs=1e-12)

    def test_scalar_closed_form(self):
        d = wasserstein_sq(GaussianBelief([0.0], [[1.0]]), GaussianBelief([0.0], [[4.0]]), [[1.0]])
        assert d == pytest.approx(1.0, rel=1e-12)

    def test_scalar_with_mean_and_weight(self):
        d = wasserstein_sq(GaussianBelief([1.0], [[1.0]]), GaussianBelief([3.0], [[9.0]]), [[2.0]])
        assert d == pytest.approx(2.0 * (4.0 + 4.0), rel=1e-12)

    def test_commuting_covariances(self):
        px, py = np.diag([1.0, 4.0, 9.0]), np.diag([4.0, 1.0, 16.0])
        d = wasserstein_sq(GaussianBelief(np.zeros(3), px), GaussianBelief(np.zeros(3), py),
                           np.eye(3))
        assert d == pytest.approx(1.0 + 1.0 + 1.0, rel=1e-12)

    def test_matches_sampled_optimal_coupling(self):
        rng = np.random.default_rng(7)
        n = 2
        px, py, g = random_spd(rng, n), random_spd(rng, n), random_spd(rng, n)
        mx, my = rng.standard_normal(n), rng.standard_normal(n)
        s = scipy.linalg.sqrtm(g).real
        ax, ay = s @ px @ s, s @ py @ s
        rx = scipy.linalg.sqrtm(ax).real
        rx_inv = np.linalg.inv(rx)
        transport = rx_inv @ scipy.linalg.sqrtm(rx @ ay @ rx).real @ rx_inv
        u = s @ mx + rng.standard_normal((100_000, n)) @ np.linalg.cholesky(ax).T
        v = s @ my + (u - s @ mx) @ transport.T
        assert np.allclose(np.cov(v.T), ay, rtol=0.03, atol=0.03)
        cost = np.sum((u - v) ** 2, axis=1)
        est, se = cost.mean(), cost.std(ddof=1) / np.sqrt(cost.size)
        d = wasserstein_sq(GaussianBelief(mx, px), GaussianBelief(my, py), g)
        assert abs(d - est) <= 4 * se

    def test_dimension_mismatch(self):
        with pytest.raises(DimensionMismatch):
            wasserstein_sq(GaussianBelief([0.0], [[1.0]]), GaussianBelief([0.0], [[1.0]]),
                           np.eye(2))


class TestSampling:
    def test_degenerate_cov_returns_mean(self):
        b = GaussianBelief([1.0, -2.0], np.zeros((2, 2)))
        assert np.array_equal(sample_gaussian(b, np.random.default_rng(3)), b.mean)

    def test_unit_variance(self):
        rng = np.random.default_rng(0)
        z = gaussian_factor(np.eye(1)) @ rng.standard_normal((1, 1_000_000))
        assert abs(z.var() - 1.0) < 0.01

    def test_same_seed_same_draw(self, rng):
        b = GaussianBelief(np.zeros(3), random_spd(rng, 3))
        a1 = sample_gaussian(b, np.random.default_rng(9))
        a2 = sample_gaussian(b, np.random.default_rng(9))
        assert np.array_equal(a1, a2)

    def test_factor_of_indefinite(self):
        with pytest.raises(CholeskyFailure):
            gaussian_factor(np.diag([1.0, -1.0]))

    def test_factor_reproduces_singular_cov(self):
        m = np.array([[1.0, 1.0], [1.0, 1.0]])
        f = gaussian_factor(m)
        assert np.allclose(f @ f.T, m)
