"""BatchNorm gradient-variance theory for full-precision, binary and ternary
networks, with a Monte Carlo harness that checks each prediction."""

from .experiment import ExperimentConfig, Resample, run_comparison, run_experiment
from .layers import QuantMode
from .theory import InitScheme, NetworkSpec, predict

__version__ = "0.1.0"
