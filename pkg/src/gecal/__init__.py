"""gecal: generalized entropy calibration weighting for missing-at-random data.

The package builds calibration weights for a partially observed outcome by
minimizing a generalized entropy subject to covariate-balance, debiasing,
and orthogonality constraints, and provides doubly robust point and interval
estimates of the population mean, Bregman-projection diagnostics, a
high-dimensional soft-calibration variant, and a Monte Carlo harness.
"""

__version__ = "0.1.0"

from .entropy import EntropySpec, parse_entropy, DomainError, LinkRangeError
from .data_model import ObservedData, BasisSpec, QWeights, build_basis, load_csv
from .propensity import PropensityFit, fit_logistic, fit_logistic_l1, pi_gradient
from .regression import RegressionFit, fit_gls, fit_q_weighted, fit_gamma_hat, fit_lasso_weighted
from .aipw import BaselineEstimate, ipw_estimate, aipw_estimate, empirical_loss, select_kappa
from .gec_core import (
    AugmentedDesign,
    DualSolution,
    CalibrationWeights,
    GecEstimate,
    InfeasibleCalibration,
    NonConvergence,
    build_design,
    dual_objective,
    solve_dual,
    recover_weights,
    gec_estimate,
    select_kappa_gec,
    norm_quantile,
)
from .bregman import BregmanReport, weighted_divergence, pythagorean_check, nested_decomposition
from .highdim import SoftCalibConfig, SoftDualSolution, soft_solve, gec_hd_estimate, default_taus
from .sim import SimScenario, SimSummary, generate_population, stratified_missingness, run_monte_carlo, nhanes_like_study

__all__ = [
    "EntropySpec",
    "parse_entropy",
    "DomainError",
    "LinkRangeError",
    "ObservedData",
    "BasisSpec",
    "QWeights",
    "build_basis",
    "load_csv",
    "PropensityFit",
    "fit_logistic",
    "fit_logistic_l1",
    "pi_gradient",
    "RegressionFit",
    "fit_gls",
    "fit_q_weighted",
    "fit_gamma_hat",
    "fit_lasso_weighted",
    "BaselineEstimate",
    "ipw_estimate",
    "aipw_estimate",
    "empirical_loss",
    "select_kappa",
    "AugmentedDesign",
    "DualSolution",
    "CalibrationWeights",
    "GecEstimate",
    "InfeasibleCalibration",
    "NonConvergence",
    "build_design",
    "dual_objective",
    "solve_dual",
    "recover_weights",
    "gec_estimate",
    "select_kappa_gec",
    "norm_quantile",
    "BregmanReport",
    "weighted_divergence",
    "pythagorean_check",
    "nested_decomposition",
    "SoftCalibConfig",
    "SoftDualSolution",
    "soft_solve",
    "gec_hd_estimate",
    "default_taus",
    "SimScenario",
    "SimSummary",
    "generate_population",
    "stratified_missingness",
    "run_monte_carlo",
    "nhanes_like_study",
]
