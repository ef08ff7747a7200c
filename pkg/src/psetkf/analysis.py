"""Offline Riccati analysis: covariance bounds, transmission probability, rate bounds.

Notation follows the filter: ``G_Y(X) = A X Aᵀ + Q - A X Cᵀ (C X Cᵀ + Y)^{-1} C X Aᵀ``
is one prediction-covariance step with measurement-noise argument ``Y``.
"""
from __future__ import annotations

import logging
import math
import warnings
from dataclasses import dataclass
from typing import Callable, NamedTuple, Optional

import numpy as np
from scipy.optimize import bisect

from .errors import CNotFullRowRank, DegenerateRho, InnerMatrixSingular, MaxIterationsExceeded
from .matgauss import GaussianBelief, as_psd, as_spd, symmetrize
from .model import LtiSystem
from .pset import TriggerConfig, _candidates, _gain_terms, _rho, run_batch
from .streams import trial_inputs

log = logging.getLogger(__name__)

THETA_ASYMMETRY_TOL = 1e-8


@dataclass(frozen=True, eq=False)
class RiccatiParams:
    A: np.ndarray
    C: np.ndarray
    Q: np.ndarray
    R: np.ndarray
    Y: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "Y", as_spd(self.Y, "Y"))

    @classmethod
    def from_system(cls, sys: LtiSystem, Y: Optional[np.ndarray] = None) -> "RiccatiParams":
        return cls(sys.A, sys.C, sys.Q, sys.R, sys.R if Y is None else Y)


def riccati_step(x: np.ndarray, params: RiccatiParams) -> np.ndarray:
    """One application of ``G_Y``."""
    A, C, Y = params.A, params.C, params.Y
    inner = C @ x @ C.T + Y
    try:
        corr = np.linalg.solve(inner, C @ x @ A.T)
    except np.linalg.LinAlgError as exc:
        raise InnerMatrixSingular("C X Cᵀ + Y is singular") from exc
    return symmetrize(A @ x @ A.T + params.Q - A @ x @ C.T @ corr)


def _require_full_row_rank(sys: LtiSystem):
    if not sys.c_full_row_rank():
        raise CNotFullRowRank("C must have full row rank")


def _lambda_ratio(sys: LtiSystem, cfg: TriggerConfig) -> float:
    return np.linalg.eigvalsh(cfg.gamma)[0] / np.linalg.eigvalsh(sys.C.T @ sys.C)[-1]


def theta_k(p_lower_k: np.ndarray, sys: LtiSystem, cfg: TriggerConfig) -> np.ndarray:
    """Lower bound ``Θ_k`` on ``KᵀΓK`` given a lower bound on the prior covariance.

    With ``N = (C P Cᵀ)^{-1}`` and ``δ = sqrt(Tr(N N)) / sqrt(Tr(R N N R))``::

        Θ = λmin(Γ)/λmax(CᵀC) · (I + N N / δ + R R + δ R N N R)^{-1}

    The products are evaluated as written; the sum is symmetrized and any
    asymmetry above 1e-8 is logged.
    """
    _require_full_row_rank(sys)
    R = sys.R
    inv_cpc = np.linalg.inv(sys.C @ p_lower_k @ sys.C.T)
    nn = inv_cpc @ inv_cpc
    delta = math.sqrt(np.trace(nn)) / math.sqrt(np.trace(R @ nn @ R))
    inner = np.eye(sys.m) + nn / delta + R @ R + delta * R @ nn @ R
    asym = np.max(np.abs(inner - inner.T)) / np.max(np.abs(inner))
    if asym > THETA_ASYMMETRY_TOL:
        log.warning("theta inner matrix asymmetric by %.2e (relative)", asym)
    return symmetrize(_lambda_ratio(sys, cfg) * np.linalg.inv(symmetrize(inner)))


class BoundSequences(NamedTuple):
    lower: np.ndarray   # (k_max, n, n); lower[k-1] bounds P_{k|k-1} from below
    upper: np.ndarray   # (k_max, n, n)
    thetas: np.ndarray  # (k_max, m, m); thetas[k-1] built from lower[k-1]


def bound_sequences(sys: LtiSystem, cfg: TriggerConfig, k_max: int) -> BoundSequences:
    """Lower and upper bound sequences on the prediction covariance.

    Both start from ``A P0 Aᵀ + Q``. The lower one iterates ``G_R``. The
    upper one steps ``k -> k+1`` with ``G_{R + Θ_k^{-1}}``, where ``Θ_k``
    comes from the lower bound at ``k``: that is the gain bound valid for
    the transition it is applied to.
    """
    _require_full_row_rank(sys)
    first = symmetrize(sys.A @ sys.x0.cov @ sys.A.T + sys.Q)
    lower = np.empty((k_max,) + first.shape)
    upper = np.empty_like(lower)
    thetas = np.empty((k_max, sys.m, sys.m))
    base = RiccatiParams.from_system(sys)
    lower[0] = upper[0] = first
    for k in range(k_max):
        thetas[k] = theta_k(lower[k], sys, cfg)
        if k + 1 == k_max:
            break
        lower[k + 1] = riccati_step(lower[k], base)
        y = sys.R + np.linalg.inv(thetas[k])
        upper[k + 1] = riccati_step(upper[k], RiccatiParams.from_system(sys, symmetrize(y)))
    return BoundSequences(lower, upper, thetas)


def iterate_to_fixed_point(params: RiccatiParams, x0: np.ndarray, tol: float = 1e-10,
                           max_iter: int = 100_000):
    """Iterate ``G_Y`` until ``‖G(X) - X‖_F <= tol ‖X‖_F``; returns ``(X, iterations, residual)``."""
    x = as_psd(x0, "x0")
    residual = math.inf
    for it in range(1, max_iter + 1):
        nxt = riccati_step(x, params)
        residual = np.linalg.norm(nxt - x) / np.linalg.norm(nxt)
        x = nxt
        if residual <= tol:
            return x, it, residual
    raise MaxIterationsExceeded(
        f"no fixed point after {max_iter} iterations (residual {residual:.3e})",
        residual, max_iter)


class FixedPoints(NamedTuple):
    p_lower: np.ndarray
    p_upper: np.ndarray
    theta: np.ndarray
    iterations: int
    residual: float


def fixed_points(sys: LtiSystem, cfg: TriggerConfig, tol: float = 1e-10,
                 max_iter: int = 100_000, x0: Optional[np.ndarray] = None,
                 upper_x0: Optional[np.ndarray] = None) -> FixedPoints:
    """Limits ``P_l`` (of ``G_R``) and ``P_u`` (of ``G_{R+Θ^{-1}}``, ``Θ`` taken at ``P_l``)."""
    _require_full_row_rank(sys)
    start = sys.Q if x0 is None else x0
    p_l, it_l, res_l = iterate_to_fixed_point(RiccatiParams.from_system(sys), start, tol, max_iter)
    theta = theta_k(p_l, sys, cfg)
    y = symmetrize(sys.R + np.linalg.inv(theta))
    p_u, it_u, res_u = iterate_to_fixed_point(
        RiccatiParams.from_system(sys, y), p_l if upper_x0 is None else upper_x0, tol, max_iter)
    return FixedPoints(p_l, p_u, theta, it_l + it_u, max(res_l, res_u))


def transmission_probability(prior: GaussianBelief, sys: LtiSystem, cfg: TriggerConfig) -> float:
    """Probability of sending at this step, before ``z_k`` is known.

    ``f = 1 - exp(-ϱ/2) / sqrt(Det((C P Cᵀ + R) KᵀΓK + I))``.
    """
    gain, s, s_inv = _gain_terms(prior.cov, sys.C, sys.R)
    p1, p0, w = _candidates(prior.cov, gain, sys.C, s_inv, cfg.gamma)
    rho = float(_rho(p0, p1, cfg.gamma, cfg.gamma_sqrt))
    det = np.linalg.det(s @ w + np.eye(sys.m))
    return float(min(max(1.0 - math.exp(-0.5 * rho) / math.sqrt(det), 0.0), 1.0))


def rate_bound_values(p_lower: np.ndarray, p_upper: np.ndarray, sys: LtiSystem,
                      cfg: TriggerConfig) -> tuple[float, float]:
    """``(lower, upper)`` rate bound from a lower and an upper prediction covariance.

    Used both with the fixed points (long-run rate bounds) and with the
    bound sequences at step ``k`` (per-step send-probability bounds).
    """
    C, R, eye = sys.C, sys.R, np.eye(sys.m)
    lam = np.linalg.eigvalsh(cfg.gamma)
    lo_mat = lam[0] * C @ p_lower @ p_lower @ C.T @ np.linalg.inv(C @ p_upper @ C.T + R) + eye
    hi_mat = lam[-1] * C @ p_upper @ p_upper @ C.T @ np.linalg.inv(C @ p_lower @ C.T + R) + eye
    lower = 1.0 - 1.0 / math.sqrt(np.linalg.det(lo_mat))
    upper = 1.0 - math.exp(-np.trace(p_upper @ cfg.gamma)) / math.sqrt(np.linalg.det(hi_mat))
    return lower, upper


@dataclass(frozen=True, eq=False)
class RateBounds:
    theta: np.ndarray
    p_lower: np.ndarray
    p_upper: np.ndarray
    rate_lower: float
    rate_upper: float
    iterations: int
    residual: float

    def __post_init__(self):
        if not 0.0 <= self.rate_lower <= self.rate_upper <= 1.0:
            raise ArithmeticError(
                f"rate bounds out of order: {self.rate_lower} > {self.rate_upper}")


def rate_bounds(sys: LtiSystem, cfg: TriggerConfig, tol: float = 1e-10,
                max_iter: int = 100_000, upper_x0: Optional[np.ndarray] = None) -> RateBounds:
    """Long-run communication-rate bounds at the Riccati fixed points."""
    fp = fixed_points(sys, cfg, tol, max_iter, upper_x0=upper_x0)
    lo, hi = rate_bound_values(fp.p_lower, fp.p_upper, sys, cfg)
    return RateBounds(fp.theta, fp.p_lower, fp.p_upper, lo, hi, fp.iterations, fp.residual)


def invert_rate_bounds(builder: Callable[[float], tuple], target: float,
                       c_min: float = 1e-6, c_max: float = 1e6, scan_points: int = 49,
                       bound_fn: Optional[Callable] = None):
    """Values of ``c`` at which the upper and the lower rate bound equal ``target``.

    Returns ``(c_upper, c_lower)``: any ``c`` achieving the target rate lies in
    ``[c_upper, c_lower]``. An entry is ``None`` when that bound never reaches
    ``target`` on ``[c_min, c_max]``. Both bounds are scanned on a log grid
    first and must be nondecreasing in ``c``; the crossing is then refined by
    bisection in ``log c``.

    ``bound_fn(sys, cfg) -> (lower, upper)`` defaults to the fixed-point bounds.
    """
    if bound_fn is None:
        def bound_fn(sys, cfg):
            rb = rate_bounds(sys, cfg)
            return rb.rate_lower, rb.rate_upper

    def bounds_at(logc):
        return bound_fn(*builder(math.exp(logc)))

    grid = np.linspace(math.log(c_min), math.log(c_max), scan_points)
    table = np.array([bounds_at(g) for g in grid])
    for col, name in ((0, "lower"), (1, "upper")):
        if np.any(np.diff(table[:, col]) < -1e-9):
            raise ArithmeticError(f"{name} rate bound is not monotone in c")

    def crossing(col):
        vals = table[:, col] - target
        if vals[0] >= 0.0:
            warnings.warn(f"target rate {target} at or below the {('lower', 'upper')[col]} "
                          f"bound at c_min; returning c_min", RuntimeWarning, stacklevel=3)
            return c_min
        idx = np.nonzero(vals >= 0.0)[0]
        if idx.size == 0:
            return None
        j = idx[0]
        root = bisect(lambda g: bounds_at(g)[col] - target, grid[j - 1], grid[j], xtol=1e-10)
        return math.exp(root)

    return crossing(1), crossing(0)


def phi_ratio(prior_cov: np.ndarray, sys: LtiSystem, cfg: TriggerConfig) -> float:
    """Conditional mean of ``‖ε‖²_{KᵀΓK} / ϱ`` given the history, for one prior covariance.

    ``Tr(S P Cᵀ (C P Cᵀ + R)^{-1} C P S) / ϱ``.
    """
    gain, s, s_inv = _gain_terms(prior_cov, sys.C, sys.R)
    p1, p0, w = _candidates(prior_cov, gain, sys.C, s_inv, cfg.gamma)
    rho = float(_rho(p0, p1, cfg.gamma, cfg.gamma_sqrt))
    sq = cfg.gamma_sqrt
    num = np.trace(sq @ prior_cov @ sys.C.T @ s_inv @ sys.C @ prior_cov @ sq)
    if rho < 1e-14:
        raise DegenerateRho(f"rho = {rho:.3e}")
    return float(num / rho)


def scalar_phi_limit(c: float, r_over_p: float) -> float:
    """Scalar small-weight limit of the ratio above, ``C² / (C² + 2r - 2 sqrt((C² + r) r))``."""
    c2 = c * c
    return c2 / (c2 + 2.0 * r_over_p - 2.0 * math.sqrt((c2 + r_over_p) * r_over_p))


class GammaStudy(NamedTuple):
    gamma_hat: np.ndarray   # (K,) Monte Carlo mean of the ratio per step
    stderr: np.ndarray      # (K,)
    degenerate: np.ndarray  # (K,) samples excluded because rho < 1e-14
    rate: float


def gamma_k_study(sys: LtiSystem, cfg: TriggerConfig, trials: int, horizon: int,
                  seed: int = 0) -> GammaStudy:
    """Monte Carlo estimate of ``E[‖ε_k‖²_{KᵀΓK} / ϱ_k]`` for ``k = 1..horizon``.

    Each trial contributes the deterministic trace ratio of its own trigger
    history, so no per-sample ``0/0`` can occur. Samples with ``ϱ < 1e-14``
    are counted in ``degenerate`` and left out of the mean.
    """
    if trials < 100:
        raise ValueError("gamma_k_study needs at least 100 trials")
    inp = trial_inputs(sys, trials, horizon, seed)
    res = run_batch(sys, inp.states, inp.measurements, inp.thresholds, "pset", cfg)
    ok = res.rho >= 1e-14
    degenerate = (~ok).sum(axis=0)
    if np.any(degenerate == trials):
        raise DegenerateRho("rho vanished in every trial at some step")
    ratio = np.where(ok, res.innovation_weight_trace / np.where(ok, res.rho, 1.0), np.nan)
    count = ok.sum(axis=0)
    mean = np.nanmean(ratio, axis=0)
    std = np.nanstd(ratio, axis=0, ddof=1)
    return GammaStudy(mean, std / np.sqrt(count), degenerate, res.rate)
