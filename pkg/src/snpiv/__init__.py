"""Sieve two-stage least squares for nonparametric IV regression with spectral features."""

from .operator import Grid, SpectralOperator, build_operator, random_operator, truncate
from .synthetic import Scenario, build_scenario, generate
from .features import MlpFeatures, OracleFeatures, oracle_factorization
from .contrastive import ContrastiveConfig, train
from .twostage import TwoStageConfig, TwoStageFit, fit, l2_error, population_fit
from .diagnostics import diagnose
from .harness import GridConfig, run_cell, run_grid, run_ugly_sweep

__all__ = [
    "Grid", "SpectralOperator", "build_operator", "random_operator", "truncate",
    "Scenario", "build_scenario", "generate",
    "MlpFeatures", "OracleFeatures", "oracle_factorization",
    "ContrastiveConfig", "train",
    "TwoStageConfig", "TwoStageFit", "fit", "l2_error", "population_fit",
    "diagnose",
    "GridConfig", "run_cell", "run_grid", "run_ugly_sweep",
]

__version__ = "0.1.0"
