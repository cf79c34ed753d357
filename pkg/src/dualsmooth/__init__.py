"""Dual randomized smoothing with input-dependent noise levels."""

from .classifiers import (
    BaseClassifier,
    ConstantClassifier,
    ExternalClassifier,
    GridTableClassifier,
    HalfspaceClassifier,
    MlpClassifier,
    load_model,
    save_model,
)
from .dual import BudgetSplit, DualConfig, DualOutcome, SigmaSet, budget_table, dual_certify, dual_predict
from .noise import NoiseStream
from .routing import ExpertPool, route_certify
from .smoothing import ABSTAIN, SamplingPlan, certify, predict

__version__ = "0.1.0"

__all__ = [
    "ABSTAIN",
    "BaseClassifier",
    "BudgetSplit",
    "ConstantClassifier",
    "DualConfig",
    "DualOutcome",
    "ExpertPool",
    "ExternalClassifier",
    "GridTableClassifier",
    "HalfspaceClassifier",
    "MlpClassifier",
    "NoiseStream",
    "SamplingPlan",
    "SigmaSet",
    "budget_table",
    "certify",
    "dual_certify",
    "dual_predict",
    "load_model",
    "predict",
    "route_certify",
    "save_model",
]
