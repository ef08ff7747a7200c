"""Remote state estimation with a posterior-based stochastic event trigger."""
from .errors import PsetError
from .matgauss import GaussianBelief, spd_sqrt, wasserstein_sq, sample_gaussian
from .model import LtiSystem, Trajectory, simulate, target_tracking_scenario, spring_mass_scenario
from .pset import (TriggerConfig, FilterState, TriggerEvaluation, StepRecord, predict,
                   kalman_gain, evaluate_trigger, update, run_sensor_estimator,
                   run_baseline_kf, run_random_kf, run_batch)
from .analysis import (RiccatiParams, RateBounds, riccati_step, theta_k, bound_sequences,
                       fixed_points, transmission_probability, rate_bounds, gamma_k_study)

__version__ = "0.1.0"
