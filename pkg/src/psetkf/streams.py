"""Counter-based random substreams for reproducible Monte Carlo.

Every trial draws from its own Philox stream keyed by ``(master seed, trial,
purpose)``, so results do not depend on how trials are batched or scheduled.
"""
from __future__ import annotations

from typing import NamedTuple

import numpy as np

from .model import LtiSystem, simulate

TRAJECTORY = 0
THRESHOLD = 1
BERNOULLI = 2


def substream(master_seed: int, *path: int) -> np.random.Generator:
    """Independent generator for ``path`` under ``master_seed``."""
    seq = np.random.SeedSequence(int(master_seed) % 2**64, spawn_key=tuple(int(p) for p in path))
    key = seq.generate_state(2, dtype=np.uint64)
    return np.random.Generator(np.random.Philox(key=key))


class TrialInputs(NamedTuple):
    """Stacked trajectories and uniform draws for ``M`` trials."""

    initial_states: np.ndarray  # (M, n)
    states: np.ndarray          # (M, K, n)
    measurements: np.ndarray    # (M, K, m)
    thresholds: np.ndarray      # (M, K) trigger draws
    bernoulli: np.ndarray       # (M, K) draws for the random-transmission baseline


def trial_inputs(sys: LtiSystem, trials: int, horizon: int, master_seed: int,
                 first_trial: int = 0) -> TrialInputs:
    """Generate inputs for trials ``first_trial .. first_trial + trials - 1``.

    Trajectory noise, trigger thresholds and baseline coin flips use separate
    substreams, so one trajectory realization is shared by every estimator
    while each decision rule keeps its own randomness.
    """
    init, xs, zs, th, bern = [], [], [], [], []
    for i in range(first_trial, first_trial + trials):
        traj = simulate(sys, horizon, substream(master_seed, i, TRAJECTORY))
        init.append(traj.initial_state)
        xs.append(traj.states)
        zs.append(traj.measurements)
        th.append(substream(master_seed, i, THRESHOLD).random(horizon))
        bern.append(substream(master_seed, i, BERNOULLI).random(horizon))
    return TrialInputs(np.array(init), np.array(xs), np.array(zs), np.array(th), np.array(bern))
