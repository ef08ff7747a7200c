"""SPD matrix helpers, Gaussian beliefs and the weighted Wasserstein metric.

Covariance-valued quantities are plain ``numpy`` arrays validated on entry
by :func:`as_spd` / :func:`as_psd`. The private helpers broadcast over any
leading batch dimensions, which is what the batched Monte Carlo engine in
:mod:`psetkf.pset` relies on.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import CholeskyFailure, DimensionMismatch, NotPositiveDefinite, NotSymmetric

SYMMETRY_RTOL = 1e-10
PSD_ATOL = 1e-12


def symmetrize(m: np.ndarray) -> np.ndarray:
    """Return ``(m + m^T) / 2`` over the last two axes."""
    return 0.5 * (m + np.swapaxes(m, -1, -2))


def _check_square_symmetric(m, name: str) -> np.ndarray:
    m = np.array(m, dtype=float, ndmin=2)
    if m.ndim != 2 or m.shape[0] != m.shape[1]:
        raise DimensionMismatch(f"{name} must be square, got shape {m.shape}")
    scale = max(float(np.max(np.abs(m))), 1e-300)
    if np.max(np.abs(m - m.T)) > SYMMETRY_RTOL * scale:
        raise NotSymmetric(f"{name} is not symmetric")
    return symmetrize(m)


def as_spd(m, name: str = "matrix") -> np.ndarray:
    """Validate ``m`` as symmetric positive definite and return it symmetrized."""
    m = _check_square_symmetric(m, name)
    lam_min = np.linalg.eigvalsh(m)[0]
    if not lam_min > 0.0:
        raise NotPositiveDefinite(f"{name} has eigenvalue {lam_min:.3e} <= 0")
    return m


def as_psd(m, name: str = "matrix") -> np.ndarray:
    """Validate ``m`` as positive semidefinite, eigenvalues >= -1e-12."""
    m = _check_square_symmetric(m, name)
    lam_min = np.linalg.eigvalsh(m)[0] if m.size else 0.0
    if lam_min < -PSD_ATOL:
        raise NotPositiveDefinite(f"{name} has eigenvalue {lam_min:.3e} < -{PSD_ATOL}")
    return m


def psd_sqrt(m: np.ndarray) -> np.ndarray:
    """Principal square root of a (batch of) symmetric PSD matrices.

    Eigenvalues are clamped at zero first, so marginally indefinite inputs
    from round-off are tolerated. No validation is done here.
    """
    w, v = np.linalg.eigh(symmetrize(m))
    w = np.sqrt(np.clip(w, 0.0, None))
    return symmetrize((v * w[..., None, :]) @ np.swapaxes(v, -1, -2))


def spd_sqrt(m) -> np.ndarray:
    """Unique SPD square root of an SPD matrix (symmetric eigendecomposition)."""
    return psd_sqrt(as_spd(m))


def cross_sqrt_trace(px: np.ndarray, py: np.ndarray, gamma_sqrt: np.ndarray) -> np.ndarray:
    """``Tr((S Px Γ Py S)^{1/2})`` for ``S = Γ^{1/2}``; broadcasts over batches.

    ``S Px Γ Py S`` is the product ``a b`` of the two PSD matrices
    ``a = S Px S`` and ``b = S Py S``. It is similar to ``a^{1/2} b a^{1/2}``,
    which is symmetric PSD, so the trace of the principal root is the sum of
    square roots of that matrix's (clamped) eigenvalues.
    """
    a = gamma_sqrt @ px @ gamma_sqrt
    b = gamma_sqrt @ py @ gamma_sqrt
    ra = psd_sqrt(a)
    lam = np.linalg.eigvalsh(symmetrize(ra @ b @ ra))
    return np.sum(np.sqrt(np.clip(lam, 0.0, None)), axis=-1)


@dataclass(frozen=True, eq=False)
class GaussianBelief:
    """Mean vector and covariance of a Gaussian.

    The covariance is only required to be PSD here (a degenerate belief is
    useful for noise-free simulation); filter code checks definiteness
    where it matters.
    """

    mean: np.ndarray
    cov: np.ndarray

    def __post_init__(self):
        mean = np.atleast_1d(np.asarray(self.mean, dtype=float))
        if mean.ndim != 1:
            raise DimensionMismatch(f"mean must be a vector, got shape {mean.shape}")
        cov = as_psd(self.cov, "cov")
        if cov.shape[0] != mean.shape[0]:
            raise DimensionMismatch(
                f"mean has dimension {mean.shape[0]} but cov is {cov.shape}")
        object.__setattr__(self, "mean", mean)
        object.__setattr__(self, "cov", cov)

    @property
    def dim(self) -> int:
        return self.mean.shape[0]

    def __repr__(self):
        return f"GaussianBelief(mean={self.mean!r}, cov={self.cov!r})"


def wasserstein_sq(x: GaussianBelief, y: GaussianBelief, gamma) -> float:
    """Squared Γ-weighted 2-Wasserstein distance between two Gaussians.

    ``‖x̄ - ȳ‖²_Γ + Tr(Px Γ + Py Γ - 2 (S Px Γ Py S)^{1/2})`` with
    ``S = Γ^{1/2}``. Round-off negatives down to -1e-9 are clamped to zero.
    """
    gamma = as_spd(gamma, "gamma")
    if not x.dim == y.dim == gamma.shape[0]:
        raise DimensionMismatch(
            f"dimensions differ: x={x.dim}, y={y.dim}, gamma={gamma.shape[0]}")
    s = psd_sqrt(gamma)
    d = x.mean - y.mean
    value = d @ gamma @ d + np.trace(x.cov @ gamma + y.cov @ gamma) \
        - 2.0 * cross_sqrt_trace(x.cov, y.cov, s)
    value = float(value)
    if value < -1e-9 * max(1.0, abs(np.trace((x.cov + y.cov) @ gamma))):
        raise ArithmeticError(f"negative squared distance {value:.3e}")
    return max(value, 0.0)


def gaussian_factor(cov: np.ndarray) -> np.ndarray:
    """Return ``L`` with ``L L^T = cov``; Cholesky when possible.

    Singular PSD covariances fall back to the symmetric square root, and
    genuinely indefinite ones raise :class:`CholeskyFailure`.
    """
    try:
        return np.linalg.cholesky(cov)
    except np.linalg.LinAlgError:
        pass
    lam_min = np.linalg.eigvalsh(symmetrize(cov))[0]
    if lam_min < -PSD_ATOL:
        raise CholeskyFailure(f"covariance is indefinite (eigenvalue {lam_min:.3e})")
    return psd_sqrt(cov)


def sample_gaussian(belief: GaussianBelief, rng: np.random.Generator) -> np.ndarray:
    """Draw ``mean + L z`` with ``z`` standard normal from ``rng``."""
    z = rng.standard_normal(belief.dim)
    return belief.mean + gaussian_factor(belief.cov) @ z
