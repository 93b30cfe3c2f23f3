"""Two-stage likelihood-ratio, Wald and Rao tests for ergodic diffusions
observed at high frequency."""

__version__ = "0.1.0"

from .errors import (AllStartsFailed, ConfigError, DifftestError, ExperimentAborted,
                     MalformedRow, MissingInvariantDensity, NonFinite, NotPositiveDefinite,
                     OptimizerInconsistency, UnequalSpacing)
from .estimate import FitResult, fit_alpha, fit_beta
from .hypotest import (StageResult, TestReport, chi2_cdf, chi2_quantile, chi2_sf,
                       noncentral_chi2_cdf, stage1_statistics, stage2_statistics,
                       two_step_decision)
from .model import (DiffusionModel, Hypothesis, ParameterSpace, Theta, get_model,
                    make_model2, make_ou_model, register_model)
from .quasilik import info_a, info_b, score_u1, score_u2, u1, u2
from .simulate import (SamplePath, SimConfig, euler_maruyama, exact_sample, load_path,
                       ou_exact, save_path)

__all__ = [
    "AllStartsFailed", "ConfigError", "DifftestError", "ExperimentAborted", "MalformedRow",
    "MissingInvariantDensity", "NonFinite", "NotPositiveDefinite", "OptimizerInconsistency",
    "UnequalSpacing", "FitResult", "fit_alpha", "fit_beta", "StageResult", "TestReport",
    "chi2_cdf", "chi2_quantile", "chi2_sf", "noncentral_chi2_cdf", "stage1_statistics",
    "stage2_statistics", "two_step_decision", "DiffusionModel", "Hypothesis",
    "ParameterSpace", "Theta", "get_model", "make_model2", "make_ou_model", "register_model",
    "info_a", "info_b", "score_u1", "score_u2", "u1", "u2", "SamplePath", "SimConfig",
    "euler_maruyama", "exact_sample", "load_path", "ou_exact", "save_path",
]
