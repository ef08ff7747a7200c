"""Linear time-invariant plant, trajectory simulation and the two test scenarios."""
from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np
import scipy.linalg

from .errors import DimensionMismatch, NonPositiveScale
from .matgauss import GaussianBelief, as_psd, as_spd, gaussian_factor, symmetrize


class DetectabilityWarning(UserWarning):
    pass


def is_detectable(A: np.ndarray, C: np.ndarray, tol: float = 1e-9) -> bool:
    """PBH test: ``rank([λI - A; C]) = n`` for every eigenvalue with ``|λ| >= 1``."""
    n = A.shape[0]
    for lam in np.linalg.eigvals(A):
        if abs(lam) < 1.0 - tol:
            continue
        pbh = np.vstack([lam * np.eye(n) - A, C.astype(complex)])
        if np.linalg.matrix_rank(pbh, tol=tol * max(1.0, np.abs(pbh).max())) < n:
            return False
    return True


@dataclass(frozen=True, eq=False)
class LtiSystem:
    """``x_k = A x_{k-1} + w_{k-1}``, ``z_k = C x_k + v_k``.

    Parameters
    ----------
    A : (n, n) array
    C : (m, n) array
    Q : (n, n) SPD process noise covariance
    R : (m, m) SPD measurement noise covariance
    x0 : GaussianBelief
        Prior on the initial state.
    allow_singular : bool
        Accept PSD (possibly zero) ``Q``, ``R`` and initial covariance. Only
        meant for noise-free simulation checks; the filters need ``Q, R > 0``.
    """

    A: np.ndarray
    C: np.ndarray
    Q: np.ndarray
    R: np.ndarray
    x0: GaussianBelief
    allow_singular: bool = False

    def __post_init__(self):
        A = np.array(self.A, dtype=float, ndmin=2)
        C = np.array(self.C, dtype=float, ndmin=2)
        n = A.shape[0]
        if A.shape != (n, n):
            raise DimensionMismatch(f"A must be square, got {A.shape}")
        if C.shape[1] != n:
            raise DimensionMismatch(f"C has {C.shape[1]} columns, expected {n}")
        check = as_psd if self.allow_singular else as_spd
        Q = check(self.Q, "Q")
        R = check(self.R, "R")
        if Q.shape[0] != n or R.shape[0] != C.shape[0]:
            raise DimensionMismatch("Q must be n x n and R must be m x m")
        x0 = self.x0
        if not isinstance(x0, GaussianBelief):
            x0 = GaussianBelief(*x0)
        if x0.dim != n:
            raise DimensionMismatch(f"x0 has dimension {x0.dim}, expected {n}")
        if not self.allow_singular:
            as_spd(x0.cov, "P0")
        for name, val in (("A", A), ("C", C), ("Q", Q), ("R", R), ("x0", x0)):
            object.__setattr__(self, name, val)
        if not is_detectable(A, C):
            warnings.warn("(C, A) is not detectable", DetectabilityWarning, stacklevel=3)

    @property
    def n(self) -> int:
        return self.A.shape[0]

    @property
    def m(self) -> int:
        return self.C.shape[0]

    def c_full_row_rank(self) -> bool:
        return np.linalg.matrix_rank(self.C) == self.m


@dataclass(frozen=True, eq=False)
class Trajectory:
    """One realization: ``states[k-1] = x_k`` and ``measurements[k-1] = z_k``, k = 1..K."""

    initial_state: np.ndarray
    states: np.ndarray
    measurements: np.ndarray

    def __post_init__(self):
        if len(self.states) != len(self.measurements):
            raise DimensionMismatch("states and measurements differ in length")

    @property
    def horizon(self) -> int:
        return len(self.states)


def simulate(sys: LtiSystem, horizon: int, rng: np.random.Generator) -> Trajectory:
    """Sample a trajectory of ``horizon`` steps.

    Draw order is fixed (initial state, all process noise, all measurement
    noise) so a given generator state always yields the same trajectory.
    """
    if horizon < 1:
        raise ValueError("horizon must be >= 1")
    n, m = sys.n, sys.m
    x = sys.x0.mean + gaussian_factor(sys.x0.cov) @ rng.standard_normal(n)
    w = rng.standard_normal((horizon, n)) @ gaussian_factor(sys.Q).T
    v = rng.standard_normal((horizon, m)) @ gaussian_factor(sys.R).T
    x0 = x
    states = np.empty((horizon, n))
    for k in range(horizon):
        x = sys.A @ x + w[k]
        states[k] = x
    measurements = states @ sys.C.T + v
    return Trajectory(initial_state=x0, states=states, measurements=measurements)


# Target tracking (constant-acceleration model, A printed with T^2 in the corner)
TT_PERIOD = 0.25
TT_MANEUVER = 5.0
TT_SIGMA_M = 0.1
TT_SIGMA_P = 1.0
TT_SIGMA_A = 0.1
TT_GAMMA_DIAG = (4.0, 1.0, 1.0)

# Spring-mass
SM_PERIOD = 0.02
SM_MASSES = (3.0, 5.0)
SM_SPRINGS = (15.0, 5.0)
SM_SIGMA_W = (1.0, 1.0)
SM_SIGMA_V = (0.5, 0.1)


def _default_x0(n: int) -> GaussianBelief:
    return GaussianBelief(np.zeros(n), np.eye(n))


def _check_scale(c: float) -> float:
    c = float(c)
    if not c > 0.0:
        raise NonPositiveScale(f"scale c must be positive, got {c}")
    return c


def target_tracking_system() -> LtiSystem:
    T = TT_PERIOD
    A = np.array([[1.0, T, T**2],
                  [0.0, 1.0, T],
                  [0.0, 0.0, 1.0]])
    C = np.array([[1.0, 0.0, 0.0],
                  [0.0, 0.0, 1.0]])
    Q = 2 * TT_MANEUVER * TT_SIGMA_M**2 * np.array([
        [T**5 / 20, T**4 / 8, T**3 / 6],
        [T**4 / 8, T**3 / 3, T**2 / 2],
        [T**3 / 6, T**2 / 2, T],
    ])
    R = np.diag([TT_SIGMA_P**2, TT_SIGMA_A**2])
    return LtiSystem(A, C, Q, R, _default_x0(3))


def target_tracking_scenario(c: float):
    """Tracking plant plus ``Γ = c·diag(4, 1, 1)``; returns ``(LtiSystem, TriggerConfig)``."""
    from .pset import TriggerConfig

    c = _check_scale(c)
    return target_tracking_system(), TriggerConfig(c * np.diag(TT_GAMMA_DIAG))


def spring_mass_continuous():
    """Continuous-time ``(A_c, Q_c)`` over the state ``[x1, x2, x1', x2']``."""
    m1, m2 = SM_MASSES
    k1, k2 = SM_SPRINGS
    Ac = np.zeros((4, 4))
    Ac[0, 2] = Ac[1, 3] = 1.0
    Ac[2, 0], Ac[2, 1] = -k1 / m1, k1 / m1
    Ac[3, 0], Ac[3, 1] = k1 / m2, -(k1 + k2) / m2
    B = np.zeros((4, 2))
    B[2, 0], B[3, 1] = 1.0 / m1, 1.0 / m2
    Qc = B @ np.diag(np.square(SM_SIGMA_W)) @ B.T
    return Ac, Qc


def zoh_discretize(Ac: np.ndarray, Qc: np.ndarray, dt: float):
    """Exact zero-order-hold ``(A_d, Q_d)`` by Van Loan's block exponential."""
    n = Ac.shape[0]
    block = np.zeros((2 * n, 2 * n))
    block[:n, :n] = -Ac
    block[:n, n:] = Qc
    block[n:, n:] = Ac.T
    F = scipy.linalg.expm(block * dt)
    Ad = F[n:, n:].T
    Qd = symmetrize(Ad @ F[:n, n:])
    return Ad, Qd


def spring_mass_system() -> LtiSystem:
    Ac, Qc = spring_mass_continuous()
    Ad, Qd = zoh_discretize(Ac, Qc, SM_PERIOD)
    C = np.array([[1.0, 0.0, 0.0, 0.0],
                  [0.0, 0.5, 0.0, 0.0]])
    R = np.diag(np.square(SM_SIGMA_V))
    return LtiSystem(Ad, C, Qd, R, _default_x0(4))


def spring_mass_scenario(c: float):
    """Spring-mass plant plus ``Γ = c·I_4``; returns ``(LtiSystem, TriggerConfig)``."""
    from .pset import TriggerConfig

    c = _check_scale(c)
    return spring_mass_system(), TriggerConfig(c * np.eye(4))


SCENARIOS = {
    "target_tracking": target_tracking_scenario,
    "spring_mass": spring_mass_scenario,
}

# Adjustable parameter per communication rate 0.1 ... 0.9
REFERENCE_RATES = (0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8, 0.9)
REFERENCE_C = {
    "target_tracking": (0.06, 0.62, 2.3, 5.9, 12.0, 24.0, 45.0, 88.0, 220.0),
    "spring_mass": tuple(1e3 * v for v in (0.72, 3, 7, 14.5, 25, 42, 69, 130, 300)),
}


def scenario(name: str, c: float):
    try:
        builder = SCENARIOS[name]
    except KeyError:
        raise ValueError(f"unknown scenario {name!r}; choose from {sorted(SCENARIOS)}") from None
    return builder(c)
