"""Distributed selective inference for sparse GLMs.

Selecting nodes fit a Lasso on their own data and report only the selected
set.  A central node aggregates the sets into one model, collects
low-dimensional summaries from every node, and returns selection-adjusted
estimates, intervals and p-values.
"""

from .errors import DistSIError
from .glm import GAUSSIAN, LOGISTIC, Dataset, FamilySpec, fit_glm
from .lasso import PenaltySpec, select, tune_lambda
from .engine import InferenceReport
from .protocol import AggregationRule, run_protocol
from .multisplit import MultisplitConfig, aggregate_pvalues, run_multisplit
from .sim import ScenarioConfig, run_scenario

__version__ = "0.1.0"

__all__ = [
    "AggregationRule",
    "Dataset",
    "DistSIError",
    "FamilySpec",
    "GAUSSIAN",
    "InferenceReport",
    "LOGISTIC",
    "MultisplitConfig",
    "PenaltySpec",
    "ScenarioConfig",
    "aggregate_pvalues",
    "fit_glm",
    "run_multisplit",
    "run_protocol",
    "run_scenario",
    "select",
    "tune_lambda",
]
