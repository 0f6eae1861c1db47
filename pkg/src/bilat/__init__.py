"""Homogeneity tests of proportion ratios across strata of bilateral correlated binary data."""

from .estimation import ConstrainedFit, GlobalFit, fisher_scoring_delta, global_fit
from .inference import TestResult, homogeneity_tests, lrt_test, score_test, wald_test
from .model import DegenerateTableError, ParameterError, StratifiedTable, StratumCounts, StratumParams

__all__ = [
    "ConstrainedFit",
    "GlobalFit",
    "fisher_scoring_delta",
    "global_fit",
    "TestResult",
    "homogeneity_tests",
    "lrt_test",
    "score_test",
    "wald_test",
    "DegenerateTableError",
    "ParameterError",
    "StratifiedTable",
    "StratumCounts",
    "StratumParams",
]
