"""Byzantine-robust distributed optimization as inexact-gradient optimization."""

from .aggregation import AggregatorSpec, robustness_coefficient, verify_robustness, verify_trials
from .attacks import AttackStrategy
from .oracle import InexactOracle, exact_oracle, make_oracle
from .optimizers import fgm, gamma_schedule, gd, pigs, solve_prox
from .problems import (
    ClientPool,
    LossOracle,
    byzantine_bounds,
    estimate_heterogeneity,
    make_logistic,
    make_quadratic,
)
from .harness import ExperimentConfig, compare_runs, emit_csv, emit_plot, run_config, run_experiment
from .trace import RunTrace

__version__ = "0.1.0"
