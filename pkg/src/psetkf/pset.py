"""Posterior-based stochastic event-triggered scheduler and its MMSE filter.

The sensor compares the two candidate posteriors it could leave the
estimator with, ``(x1, P1)`` if it sends ``z_k`` and ``(x0, P0)`` if it stays
silent, and stays silent with probability

    exp(-1/2 (‖ε_k‖²_{KᵀΓK} + ϱ_k)),

where ``ε_k`` is the innovation and ``ϱ_k`` the covariance part of the squared
Γ-weighted Wasserstein distance between the candidates. Because that
probability is a Gaussian kernel in ``z_k``, silence is itself a Gaussian
measurement and the filter stays exactly Kalman-like.

The numerical kernels (``_gain_terms``, ``_candidates``, ``_rho``) broadcast
over leading batch axes. The single-step API below and :func:`run_batch`
both go through them.
"""
from __future__ import annotations

import contextlib
from dataclasses import dataclass
from typing import Optional

import numpy as np

from .errors import (DimensionMismatch, InnovationCovNotPD, MissingMeasurement,
                     UnexpectedMeasurement)
from .matgauss import GaussianBelief, as_spd, cross_sqrt_trace, psd_sqrt, symmetrize
from .model import LtiSystem, Trajectory

# Flipped to -1 only by the mutation check in ``psetkf verify --inject-fault``.
_CORRECTION_SIGN = 1.0


@contextlib.contextmanager
def inject_correction_sign_flip():
    """Temporarily negate the silent-step covariance correction (fault injection)."""
    global _CORRECTION_SIGN
    saved = _CORRECTION_SIGN
    _CORRECTION_SIGN = -1.0
    try:
        yield
    finally:
        _CORRECTION_SIGN = saved


def _t(m):
    return np.swapaxes(m, -1, -2)


@dataclass(frozen=True, eq=False)
class TriggerConfig:
    """Weight matrix ``Γ`` of the trigger and its cached square root ``S``."""

    gamma: np.ndarray
    gamma_sqrt: Optional[np.ndarray] = None

    def __post_init__(self):
        gamma = as_spd(self.gamma, "gamma")
        object.__setattr__(self, "gamma", gamma)
        if self.gamma_sqrt is None:
            object.__setattr__(self, "gamma_sqrt", psd_sqrt(gamma))
        else:
            s = as_spd(self.gamma_sqrt, "gamma_sqrt")
            err = np.linalg.norm(s @ s - gamma) / np.linalg.norm(gamma)
            if err > 1e-9:
                raise ValueError(f"gamma_sqrt does not square to gamma (rel. err {err:.2e})")
            object.__setattr__(self, "gamma_sqrt", s)

    @property
    def dim(self) -> int:
        return self.gamma.shape[0]

    def scaled(self, factor: float) -> "TriggerConfig":
        return TriggerConfig(factor * self.gamma)


@dataclass(frozen=True, eq=False)
class FilterState:
    posterior: GaussianBelief
    step: int = 0


@dataclass(frozen=True, eq=False)
class TriggerEvaluation:
    """Everything the sensor computes at one step before deciding to send."""

    prior: GaussianBelief
    gain: np.ndarray
    innovation: np.ndarray
    p1: GaussianBelief
    p0: GaussianBelief
    rho: float
    no_send_probability: float
    decision: int
    threshold_draw: float
    innovation_term: float = float("nan")


@dataclass(frozen=True, eq=False)
class StepRecord:
    k: int
    varsigma: int
    innovation: np.ndarray
    rho: float
    no_send_probability: float
    threshold_draw: float
    posterior: GaussianBelief
    true_state: np.ndarray

    @property
    def sq_error(self) -> float:
        d = self.true_state - self.posterior.mean
        return float(d @ d)


# -- kernels ---------------------------------------------------------------

def _predict(mean, cov, A, Q):
    return mean @ A.T, symmetrize(A @ cov @ A.T + Q)


def _gain_terms(prior_cov, C, R):
    """Return ``(K, S, S^{-1})`` with ``S = C P Cᵀ + R`` factorized by Cholesky."""
    s = symmetrize(C @ prior_cov @ C.T + R)
    try:
        chol = np.linalg.cholesky(s)
    except np.linalg.LinAlgError as exc:
        raise InnovationCovNotPD("C P Cᵀ + R is not positive definite") from exc
    chol_inv = np.linalg.inv(chol)
    s_inv = _t(chol_inv) @ chol_inv
    gain = prior_cov @ C.T @ s_inv
    return gain, s, s_inv


def _candidates(prior_cov, gain, C, s_inv, gamma):
    """Covariances of the send / no-send posteriors and ``W = KᵀΓK``.

    ``P0 = P1 + K (KᵀΓK + (C P Cᵀ + R)^{-1})^{-1} Kᵀ``.
    """
    n = prior_cov.shape[-1]
    p1 = symmetrize((np.eye(n) - gain @ C) @ prior_cov)
    w = symmetrize(_t(gain) @ gamma @ gain)
    correction = gain @ np.linalg.inv(w + s_inv) @ _t(gain)
    p0 = symmetrize(p1 + _CORRECTION_SIGN * correction)
    return p1, p0, w


def _rho(p0, p1, gamma, gamma_sqrt):
    """``Tr(P1 Γ + P0 Γ - 2 (S P0 Γ P1 S)^{1/2})``, clamped at zero."""
    tr = np.einsum("...ij,ji->...", p0 + p1, gamma)
    return np.clip(tr - 2.0 * cross_sqrt_trace(p0, p1, gamma_sqrt), 0.0, None)


def _quad(w, e):
    return np.einsum("...i,...ij,...j->...", e, w, e)


# -- single-step API -------------------------------------------------------

def predict(state: FilterState, sys: LtiSystem) -> GaussianBelief:
    """Time update ``(A x, A P Aᵀ + Q)``."""
    mean, cov = _predict(state.posterior.mean, state.posterior.cov, sys.A, sys.Q)
    return GaussianBelief(mean, cov)


def kalman_gain(prior: GaussianBelief, sys: LtiSystem) -> np.ndarray:
    return _gain_terms(prior.cov, sys.C, sys.R)[0]


def evaluate_trigger(prior: GaussianBelief, z, sys: LtiSystem, cfg: TriggerConfig,
                     theta: float) -> TriggerEvaluation:
    """Sensor side: build both candidate posteriors and decide.

    ``ς_k = 0`` iff ``exp(-½(‖ε‖²_{KᵀΓK} + ϱ)) >= theta``.
    """
    if not 0.0 <= theta <= 1.0:
        raise ValueError(f"threshold draw must lie in [0, 1], got {theta}")
    z = np.atleast_1d(np.asarray(z, dtype=float))
    if z.shape != (sys.m,) or cfg.dim != sys.n:
        raise DimensionMismatch("measurement or gamma dimension does not match the system")
    gain, _, s_inv = _gain_terms(prior.cov, sys.C, sys.R)
    p1, p0, w = _candidates(prior.cov, gain, sys.C, s_inv, cfg.gamma)
    innovation = z - sys.C @ prior.mean
    rho = float(_rho(p0, p1, cfg.gamma, cfg.gamma_sqrt))
    quad = float(_quad(w, innovation))
    keep = float(np.exp(-0.5 * (quad + rho)))
    return TriggerEvaluation(
        prior=prior,
        gain=gain,
        innovation=innovation,
        p1=GaussianBelief(prior.mean + gain @ innovation, p1),
        p0=GaussianBelief(prior.mean, p0),
        rho=rho,
        no_send_probability=keep,
        decision=0 if keep >= theta else 1,
        threshold_draw=float(theta),
        innovation_term=quad,
    )


def update(prior: GaussianBelief, evaluation: TriggerEvaluation, z_if_sent,
           sys: LtiSystem, cfg: TriggerConfig, step: int = 0) -> FilterState:
    """Estimator side: fold in either ``z_k`` or the fact that nothing arrived."""
    if evaluation.decision == 1:
        if z_if_sent is None:
            raise MissingMeasurement("decision is 1 but no measurement was delivered")
        z = np.atleast_1d(np.asarray(z_if_sent, dtype=float))
        mean = prior.mean + evaluation.gain @ (z - sys.C @ prior.mean)
        return FilterState(GaussianBelief(mean, evaluation.p1.cov), step)
    if z_if_sent is not None:
        raise UnexpectedMeasurement("decision is 0 but a measurement was delivered")
    return FilterState(GaussianBelief(prior.mean, evaluation.p0.cov), step)


def _initial_state(sys: LtiSystem) -> FilterState:
    return FilterState(sys.x0, 0)


def run_sensor_estimator(sys: LtiSystem, cfg: TriggerConfig, traj: Trajectory,
                         rng: np.random.Generator) -> list[StepRecord]:
    """Closed loop: predict, draw ``ϑ_k``, decide at the sensor, update remotely.

    Sensor and estimator share the prior through the (reliable) feedback
    channel, so a single recursion serves both sides. All ``ϑ`` draws are
    taken up front, one per step, in order.
    """
    thetas = rng.random(traj.horizon)
    state = _initial_state(sys)
    records = []
    for k in range(traj.horizon):
        prior = predict(state, sys)
        z = traj.measurements[k]
        ev = evaluate_trigger(prior, z, sys, cfg, thetas[k])
        state = update(prior, ev, z if ev.decision else None, sys, cfg, step=k + 1)
        records.append(StepRecord(k + 1, ev.decision, ev.innovation, ev.rho,
                                  ev.no_send_probability, ev.threshold_draw,
                                  state.posterior, traj.states[k]))
    return records


def _kf_records(sys, traj, sends):
    state = _initial_state(sys)
    records = []
    for k in range(traj.horizon):
        prior = predict(state, sys)
        innovation = traj.measurements[k] - sys.C @ prior.mean
        if sends[k]:
            gain, _, _ = _gain_terms(prior.cov, sys.C, sys.R)
            cov = symmetrize((np.eye(sys.n) - gain @ sys.C) @ prior.cov)
            post = GaussianBelief(prior.mean + gain @ innovation, cov)
        else:
            post = prior
        state = FilterState(post, k + 1)
        records.append(StepRecord(k + 1, int(sends[k]), innovation, float("nan"),
                                  0.0 if sends[k] else 1.0, float("nan"),
                                  post, traj.states[k]))
    return records


def run_baseline_kf(sys: LtiSystem, traj: Trajectory) -> list[StepRecord]:
    """Standard Kalman filter receiving every measurement."""
    return _kf_records(sys, traj, np.ones(traj.horizon, dtype=bool))


def run_random_kf(sys: LtiSystem, traj: Trajectory, send_prob: float,
                  rng: np.random.Generator) -> list[StepRecord]:
    """Kalman filter fed by i.i.d. Bernoulli(``send_prob``) transmissions.

    A missing packet carries no information, so the posterior is just the
    prediction.
    """
    if not 0.0 <= send_prob <= 1.0:
        raise ValueError(f"send_prob must lie in [0, 1], got {send_prob}")
    return _kf_records(sys, traj, rng.random(traj.horizon) < send_prob)


# -- batched engine ----------------------------------------------------------

ESTIMATORS = ("pset", "kf", "random")


@dataclass(frozen=True, eq=False)
class BatchResult:
    """Per-trial, per-step outputs of :func:`run_batch`; arrays are ``(M, K)``."""

    sends: np.ndarray
    sq_err: np.ndarray
    post_trace: np.ndarray
    rho: np.ndarray
    no_send_prob: np.ndarray
    innovation_weight_trace: np.ndarray
    prior_cov: Optional[np.ndarray] = None

    @property
    def rate(self) -> float:
        return float(self.sends.mean())


def run_batch(sys: LtiSystem, states: np.ndarray, measurements: np.ndarray,
              draws: np.ndarray, estimator: str = "pset",
              cfg: Optional[TriggerConfig] = None, send_prob: Optional[float] = None,
              keep_prior_cov: bool = False) -> BatchResult:
    """Run ``M`` independent trials of one estimator side by side.

    Parameters
    ----------
    states, measurements : (M, K, n) and (M, K, m) arrays
        True states ``x_1..x_K`` and measurements per trial.
    draws : (M, K) array of uniforms
        ``ϑ_k`` for ``"pset"``, Bernoulli draws for ``"random"``; unused by ``"kf"``.
    estimator : {"pset", "kf", "random"}
    keep_prior_cov : bool
        Also return every ``P_{k|k-1}`` as an ``(M, K, n, n)`` array.

    For ``"pset"`` the ``rho``, ``no_send_prob`` and ``innovation_weight_trace``
    (``Tr(KᵀΓK (C P Cᵀ + R))``) columns are filled; for the baselines they are NaN.
    """
    if estimator not in ESTIMATORS:
        raise ValueError(f"unknown estimator {estimator!r}")
    if estimator == "pset" and cfg is None:
        raise ValueError("pset estimator needs a TriggerConfig")
    if estimator == "random" and (send_prob is None or not 0.0 <= send_prob <= 1.0):
        raise ValueError("random estimator needs send_prob in [0, 1]")
    M, K, n = states.shape
    A, C, Q, R = sys.A, sys.C, sys.Q, sys.R
    mean = np.broadcast_to(sys.x0.mean, (M, n)).copy()
    cov = np.broadcast_to(sys.x0.cov, (M, n, n)).copy()
    out = {name: np.full((M, K), np.nan) for name in
           ("sq_err", "post_trace", "rho", "no_send_prob", "innovation_weight_trace")}
    sends = np.zeros((M, K), dtype=bool)
    prior_covs = np.empty((M, K, n, n)) if keep_prior_cov else None
    eye = np.eye(n)
    for k in range(K):
        mean, cov = _predict(mean, cov, A, Q)
        if keep_prior_cov:
            prior_covs[:, k] = cov
        gain, s, s_inv = _gain_terms(cov, C, R)
        innovation = measurements[:, k] - mean @ C.T
        if estimator == "pset":
            p1, p0, w = _candidates(cov, gain, C, s_inv, cfg.gamma)
            rho = _rho(p0, p1, cfg.gamma, cfg.gamma_sqrt)
            keep = np.exp(-0.5 * (_quad(w, innovation) + rho))
            send = keep < draws[:, k]
            out["rho"][:, k] = rho
            out["no_send_prob"][:, k] = keep
            out["innovation_weight_trace"][:, k] = np.einsum("...ij,...ji->...", w, s)
        else:
            p1 = symmetrize((eye - gain @ C) @ cov)
            p0 = cov
            send = np.ones(M, dtype=bool) if estimator == "kf" else draws[:, k] < send_prob
        corrected = mean + np.einsum("...ij,...j->...i", gain, innovation)
        mean = np.where(send[:, None], corrected, mean)
        cov = np.where(send[:, None, None], p1, p0)
        sends[:, k] = send
        err = states[:, k] - mean
        out["sq_err"][:, k] = np.einsum("...i,...i->...", err, err)
        out["post_trace"][:, k] = np.trace(cov, axis1=-2, axis2=-1)
    return BatchResult(sends=sends, prior_cov=prior_covs, **out)
