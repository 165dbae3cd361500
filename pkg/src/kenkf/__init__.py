"""Ensemble Kalman inversion with a mean-field particle solver and moment analysis."""
from .errors import (ConfigurationError, KenkfError, NotCovered, NumericDivergence,
                     UnsupportedOperation)
from .problem import (LinearModel, NoiseModel, NonlinearModel, Observation, apply_forward,
                      gradient_phi, least_squares)
from .ensemble import (Ensemble, MomentState, Sigma, covariance_cu, covariance_du,
                       discrete_enkf_step, empirical_moments, euler_step)
from .meanfield import (IterationTrace, NoiseKind, SolverConfig, StopReason, Stopping, run,
                        stable_epsilon)
from .problems import build_linear_elliptic, build_nonlinear_problem, build_problem
from .kernels import BACKEND_NAME

__version__ = "0.1.0"

__all__ = [
    "ConfigurationError", "KenkfError", "NotCovered", "NumericDivergence", "UnsupportedOperation",
    "LinearModel", "NoiseModel", "NonlinearModel", "Observation", "apply_forward",
    "gradient_phi", "least_squares",
    "Ensemble", "MomentState", "Sigma", "covariance_cu", "covariance_du", "discrete_enkf_step",
    "empirical_moments", "euler_step",
    "IterationTrace", "NoiseKind", "SolverConfig", "StopReason", "Stopping", "run",
    "stable_epsilon",
    "build_linear_elliptic", "build_nonlinear_problem", "build_problem",
    "BACKEND_NAME",
]
