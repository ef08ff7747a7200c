"""Monte Carlo experiments, metrics and the independent verification oracles."""
from __future__ import annotations

import math
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Callable, NamedTuple, Optional, Sequence

import numpy as np
from scipy.integrate import trapezoid

from .analysis import rate_bounds, transmission_probability
from .errors import DimensionMismatch, GridTooCoarse
from .matgauss import GaussianBelief, symmetrize
from .model import LtiSystem, scenario as build_scenario, simulate
from .pset import (ESTIMATORS, BatchResult, FilterState, TriggerConfig, _candidates,
                   _gain_terms, evaluate_trigger, predict, run_batch, update)
from .streams import THRESHOLD, TRAJECTORY, substream, trial_inputs

CHUNK_TRIALS = 250


@dataclass(frozen=True)
class ExperimentConfig:
    """What to run. ``builder(c) -> (LtiSystem, TriggerConfig)`` overrides the
    named scenario, e.g. for a user-supplied plant."""

    scenario: str
    c_grid: tuple
    trials: int
    horizon: int
    seed: int = 0
    estimators: tuple = ("pset", "kf", "random")
    builder: Optional[Callable] = field(default=None, compare=False, repr=False)

    def __post_init__(self):
        object.__setattr__(self, "c_grid", tuple(float(c) for c in self.c_grid))
        object.__setattr__(self, "estimators", tuple(self.estimators))
        if self.trials < 1 or self.horizon < 1:
            raise ValueError("trials and horizon must be >= 1")
        if not self.c_grid:
            raise ValueError("c grid must not be empty")
        if any(c <= 0 for c in self.c_grid):
            raise ValueError("c grid entries must be positive")
        unknown = set(self.estimators) - set(ESTIMATORS)
        if unknown or not self.estimators:
            raise ValueError(f"estimators must be a nonempty subset of {ESTIMATORS}")
        if self.builder is None:
            build_scenario(self.scenario, 1.0)

    def build(self, c: float):
        if self.builder is not None:
            return self.builder(c)
        return build_scenario(self.scenario, c)


def _column_fsum(a: np.ndarray) -> np.ndarray:
    """Correctly rounded column sums, independent of trial order."""
    return np.array([math.fsum(col) for col in a.T])


@dataclass(frozen=True, eq=False)
class MetricsAccumulator:
    """Trial-averaged metrics for one estimator at one ``c``.

    ``E_k[k-1] = (1/k) Σ_{j<=k} sqrt(mean_i ‖x_j(i) - x̂_j(i)‖²)`` and
    ``T_k[k-1] = (1/k) Σ_{j<=k} mean_i Tr(P_{j|j}(i))``.
    """

    E_k: np.ndarray
    T_k: np.ndarray
    rate: float
    mse_k: np.ndarray
    trace_k: np.ndarray
    trials: int

    @classmethod
    def from_batch(cls, res: BatchResult) -> "MetricsAccumulator":
        m = res.sq_err.shape[0]
        mse = _column_fsum(res.sq_err) / m
        trace = _column_fsum(res.post_trace) / m
        steps = np.arange(1, mse.size + 1)
        e_k = np.cumsum(np.sqrt(mse)) / steps
        t_k = np.cumsum(trace) / steps
        rate = math.fsum(res.sends.sum(axis=0).astype(float)) / res.sends.size
        return cls(e_k, t_k, rate, mse, trace, m)


def _concat(parts: Sequence[BatchResult]) -> BatchResult:
    if len(parts) == 1:
        return parts[0]
    kw = {name: np.concatenate([getattr(p, name) for p in parts])
          for name in ("sends", "sq_err", "post_trace", "rho", "no_send_prob",
                       "innovation_weight_trace")}
    if parts[0].prior_cov is not None:
        kw["prior_cov"] = np.concatenate([p.prior_cov for p in parts])
    return BatchResult(**kw)


def _chunks(total: int):
    return [(s, min(CHUNK_TRIALS, total - s)) for s in range(0, total, CHUNK_TRIALS)]


def run_trials(sys: LtiSystem, estimator: str, trials: int, horizon: int, seed: int,
               cfg: Optional[TriggerConfig] = None, send_prob: Optional[float] = None,
               keep_prior_cov: bool = False) -> BatchResult:
    """Run ``trials`` independent trials of one estimator (chunked to bound memory)."""
    parts = []
    for first, count in _chunks(trials):
        inp = trial_inputs(sys, count, horizon, seed, first_trial=first)
        draws = inp.bernoulli if estimator == "random" else inp.thresholds
        parts.append(run_batch(sys, inp.states, inp.measurements, draws, estimator,
                               cfg, send_prob, keep_prior_cov))
    return _concat(parts)


def worker_count(threads: Optional[int] = None) -> int:
    if threads is None:
        threads = int(os.environ.get("PSET_THREADS", "1") or 1)
    return max(1, int(threads))


@dataclass
class ExperimentResult:
    config: ExperimentConfig
    metrics: dict = field(default_factory=dict)   # (estimator, c) -> MetricsAccumulator
    batches: dict = field(default_factory=dict)   # (estimator, c) -> BatchResult


def run_experiment(cfg: ExperimentConfig, threads: Optional[int] = None,
                   keep_batches: bool = False) -> ExperimentResult:
    """Run every requested estimator at every ``c`` of the grid.

    All estimators in a trial see the same trajectory. The random baseline
    at a given ``c`` transmits with the empirical PSET rate at that ``c``,
    so PSET is run whenever the random baseline is requested.
    Results are identical for any number of worker threads.
    """
    sys, _ = cfg.build(cfg.c_grid[0])
    kf = None
    if "kf" in cfg.estimators:
        kf = run_trials(sys, "kf", cfg.trials, cfg.horizon, cfg.seed)

    def job(c):
        _, trig = cfg.build(c)
        out = {}
        if "pset" in cfg.estimators or "random" in cfg.estimators:
            out["pset"] = run_trials(sys, "pset", cfg.trials, cfg.horizon, cfg.seed, trig)
        if "random" in cfg.estimators:
            out["random"] = run_trials(sys, "random", cfg.trials, cfg.horizon, cfg.seed,
                                       send_prob=out["pset"].rate)
        if kf is not None:
            out["kf"] = kf
        return c, out

    with ThreadPoolExecutor(max_workers=worker_count(threads)) as pool:
        done = list(pool.map(job, cfg.c_grid))
    result = ExperimentResult(cfg)
    for c, out in done:
        for est in cfg.estimators:
            result.metrics[(est, c)] = MetricsAccumulator.from_batch(out[est])
            if keep_batches:
                result.batches[(est, c)] = out[est]
    return result


# -- grid-Bayes oracle -------------------------------------------------------

class PosteriorCheck(NamedTuple):
    step: int
    prior_mean: float
    prior_var: float
    oracle_mean: float
    oracle_var: float
    closed_var: float
    oracle_silence_prob: float
    closed_silence_prob: float


@dataclass(frozen=True, eq=False)
class PosteriorReport:
    checks: list

    @property
    def max_mean_dev(self) -> float:
        return max(abs(c.oracle_mean - c.prior_mean) for c in self.checks)

    @property
    def max_rel_var_dev(self) -> float:
        return max(abs(c.oracle_var - c.closed_var) / c.closed_var for c in self.checks)

    @property
    def max_prob_dev(self) -> float:
        return max(abs(c.oracle_silence_prob - c.closed_silence_prob) for c in self.checks)


def silent_posterior_on_grid(prior_mean: float, prior_var: float, sys: LtiSystem,
                             cfg: TriggerConfig, grid_points: int = 10001,
                             width: float = 10.0, v_points: int = 401):
    """Brute-force ``p(x_k | ς_k = 0, I_{1:k-1})`` for a scalar system.

    The prior density on a uniform x-grid is multiplied by
    ``Pr(ς_k = 0 | x_k) = ∫ exp(-½(‖ε‖²_{KᵀΓK} + ϱ)) φ(v; 0, R) dv`` with
    ``ε = C x + v - C x_{k|k-1}``, the v-integral also done on a uniform grid.
    Only the gain and ``ϱ`` enter from the filter; the posterior shape is
    found numerically. Returns ``(mean, var, Pr(ς_k = 0 | I_{1:k-1}))``.
    """
    if sys.n != 1 or sys.m != 1:
        raise DimensionMismatch("grid oracle is scalar only")
    if width < 8.0 or grid_points < 10_000:
        raise GridTooCoarse("grid must span >= 8 std devs with >= 1e4 points")
    c, r = float(sys.C[0, 0]), float(sys.R[0, 0])
    sd = math.sqrt(prior_var)
    x = prior_mean + np.linspace(-width * sd, width * sd, grid_points)
    dx = x[1] - x[0]
    prior = np.exp(-0.5 * (x - prior_mean) ** 2 / prior_var) / math.sqrt(2 * math.pi * prior_var)
    mass = trapezoid(prior, dx=dx)
    if abs(mass - 1.0) > 1e-6:
        raise GridTooCoarse(f"prior mass on grid is {mass:.9f}")

    ev = evaluate_trigger(GaussianBelief([prior_mean], [[prior_var]]), [c * prior_mean],
                          sys, cfg, 0.0)
    weight = float(ev.gain[0, 0] ** 2 * cfg.gamma[0, 0])
    rho = ev.rho

    sv = math.sqrt(r)
    v = np.linspace(-12 * sv, 12 * sv, v_points)
    dv = v[1] - v[0]
    pv = np.exp(-0.5 * v**2 / r) / math.sqrt(2 * math.pi * r)
    silence = np.empty_like(x)
    for lo in range(0, x.size, 2000):
        eps = c * (x[lo:lo + 2000, None] - prior_mean) + v[None, :]
        silence[lo:lo + 2000] = trapezoid(np.exp(-0.5 * (weight * eps**2 + rho)) * pv,
                                         dx=dv, axis=1)
    joint = prior * silence
    norm = trapezoid(joint, dx=dx)
    mean = trapezoid(x * joint, dx=dx) / norm
    var = trapezoid((x - mean) ** 2 * joint, dx=dx) / norm
    return mean, var, norm


def verify_posterior(scalar_sys: LtiSystem, cfg: TriggerConfig, steps: int = 50,
                     grid_points: int = 10001, seed: int = 0) -> PosteriorReport:
    """Compare the closed-form silent-step posterior with the grid oracle.

    The filter is run along a simulated trajectory for ``steps`` steps; at
    every step the oracle's silent posterior is compared with
    ``(x_{k|k-1}, P0)`` and its silence probability with ``1 - f_k``.
    """
    traj = simulate(scalar_sys, steps, substream(seed, 0, TRAJECTORY))
    thetas = substream(seed, 0, THRESHOLD).random(steps)
    state = FilterState(scalar_sys.x0, 0)
    checks = []
    for k in range(steps):
        prior = predict(state, scalar_sys)
        pm, pv = float(prior.mean[0]), float(prior.cov[0, 0])
        o_mean, o_var, o_norm = silent_posterior_on_grid(pm, pv, scalar_sys, cfg, grid_points)
        z = traj.measurements[k]
        ev = evaluate_trigger(prior, z, scalar_sys, cfg, thetas[k])
        f_k = transmission_probability(prior, scalar_sys, cfg)
        checks.append(PosteriorCheck(k + 1, pm, pv, o_mean, o_var, float(ev.p0.cov[0, 0]),
                                     o_norm, 1.0 - f_k))
        state = update(prior, ev, z if ev.decision else None, scalar_sys, cfg, step=k + 1)
    return PosteriorReport(checks)


# -- algebraic identity battery ---------------------------------------------

class CheckResult(NamedTuple):
    name: str
    worst: float
    tolerance: float
    instances: int

    @property
    def passed(self) -> bool:
        return self.worst <= self.tolerance


def random_psd(rng: np.random.Generator, n: int, rank: Optional[int] = None,
               floor: float = 0.0) -> np.ndarray:
    rank = n if rank is None else rank
    g = rng.standard_normal((n, rank))
    return symmetrize(g @ g.T + floor * np.eye(n))


def _rel(a, b):
    return float(np.max(np.abs(a - b)) / max(np.max(np.abs(b)), 1e-300))


def _random_filter_case(rng):
    n = int(rng.integers(1, 6))
    m = int(rng.integers(1, n + 1))
    C = rng.standard_normal((m, n))
    while np.linalg.cond(C) > 1e2:
        C = rng.standard_normal((m, n))
    sys = LtiSystem(rng.standard_normal((n, n)) / math.sqrt(n), C, random_psd(rng, n, floor=0.1),
                    random_psd(rng, m, floor=0.1),
                    GaussianBelief(np.zeros(n), np.eye(n)))
    return sys, random_psd(rng, n, floor=0.1), random_psd(rng, n, floor=0.1)


def check_gain_form_symmetry(rng):
    n = int(rng.integers(1, 7))
    e = random_psd(rng, n, rank=int(rng.integers(0, n + 1)))
    f = random_psd(rng, n, floor=0.05)
    inv = np.linalg.inv(e + f)
    left, right = e - e @ inv @ e, f - f @ inv @ f
    scale = max(np.max(np.abs(e)), np.max(np.abs(f)))
    psd_violation = max(0.0, -np.linalg.eigvalsh(symmetrize(left))[0]) / scale
    return max(_rel(left, right) if np.max(np.abs(right)) > 1e-12 * scale else 0.0,
               psd_violation)


def check_determinant_order(rng):
    n = int(rng.integers(1, 7))
    h = random_psd(rng, n, rank=int(rng.integers(0, n + 1)))
    e = h + random_psd(rng, n, rank=int(rng.integers(0, n + 1)))
    d = random_psd(rng, n, rank=int(rng.integers(0, n + 1)))
    f = d + random_psd(rng, n, rank=int(rng.integers(0, n + 1)))
    big = np.linalg.slogdet(e @ f + np.eye(n))[1]
    small = np.linalg.slogdet(h @ d + np.eye(n))[1]
    return max(0.0, small - big)


def check_trace_order(rng):
    n = int(rng.integers(1, 7))
    x = random_psd(rng, n, rank=int(rng.integers(0, n + 1)))
    y = x + random_psd(rng, n, rank=int(rng.integers(0, n + 1)))
    a = float(rng.uniform(0.01, 10.0))
    eye = np.eye(n)
    tx = np.trace(x @ np.linalg.solve(x + a * eye, x))
    ty = np.trace(y @ np.linalg.solve(y + a * eye, y))
    return max(0.0, tx - ty) / max(ty, 1.0)


def check_silent_cov_forms(rng):
    """Silent covariance two ways: additive correction vs inverse of its precision."""
    sys, p, gamma = _random_filter_case(rng)
    gain, _, s_inv = _gain_terms(p, sys.C, sys.R)
    p1, p0, w = _candidates(p, gain, sys.C, s_inv, gamma)
    r_inv = np.linalg.inv(sys.R)
    precision = np.linalg.inv(p1) - sys.C.T @ r_inv @ np.linalg.inv(w + r_inv) @ r_inv @ sys.C
    return _rel(np.linalg.inv(precision), p0)


def check_silent_prediction_form(rng):
    """``A P0 Aᵀ + Q`` against its matrix-inversion-lemma rearrangement."""
    sys, p, gamma = _random_filter_case(rng)
    gain, s, s_inv = _gain_terms(p, sys.C, sys.R)
    _, p0, w = _candidates(p, gain, sys.C, s_inv, gamma)
    A, C = sys.A, sys.C
    direct = A @ p0 @ A.T + sys.Q
    inner = C @ p @ C.T + sys.R + np.linalg.inv(w)
    rearranged = A @ p @ A.T + sys.Q - A @ p @ C.T @ np.linalg.solve(inner, C @ p @ A.T)
    return _rel(rearranged, direct)


IDENTITY_CHECKS = {
    "gain_form_symmetry": (check_gain_form_symmetry, 1e-9),
    "determinant_order": (check_determinant_order, 1e-10),
    "trace_order": (check_trace_order, 1e-10),
    "silent_cov_two_forms": (check_silent_cov_forms, 1e-9),
    "silent_prediction_inversion_lemma": (check_silent_prediction_form, 1e-8),
}


def identity_battery(instances: int = 1000, seed: int = 0) -> list[CheckResult]:
    """Run each algebraic check on ``instances`` random cases; report the worst deviation."""
    results = []
    for idx, (name, (fn, tol)) in enumerate(IDENTITY_CHECKS.items()):
        rng = substream(seed, 10_000 + idx)
        worst = max(fn(rng) for _ in range(instances))
        results.append(CheckResult(name, worst, tol, instances))
    return results


# -- rate sweeps ---------------------------------------------------------------

class SweepRow(NamedTuple):
    c: float
    rate_lower: float
    rate_upper: float
    empirical_rate: float
    trace_p_lower: float
    trace_p_upper: float


def sweep_rate_bounds(scenario: str, c_grid: Sequence[float], trials: int = 200,
                      horizon: int = 300, seed: int = 0) -> list[SweepRow]:
    """Theoretical rate bounds next to the empirical PSET rate for each ``c``."""
    rows = []
    for c in c_grid:
        sys, trig = build_scenario(scenario, c)
        rb = rate_bounds(sys, trig)
        emp = run_trials(sys, "pset", trials, horizon, seed, trig).rate if trials else float("nan")
        rows.append(SweepRow(float(c), rb.rate_lower, rb.rate_upper, emp,
                             float(np.trace(rb.p_lower)), float(np.trace(rb.p_upper))))
    return rows
