"""Sparse Bayesian multitask logistic regression fitted by coordinate-ascent
variational inference, with synthetic benchmarks and L1 baselines."""

__version__ = "0.1.0"

from .core import Hyperparameters, MultitaskDataset, TaskData, VariationalState
from .inference import FitConfig, FitResult, cavi_fit
from .model_selection import fit_bayes_cv
from .prediction import predict_proba, predict_proba_interval
from .synthgen import generate, get_scenario, list_scenarios

__all__ = [
    "Hyperparameters",
    "MultitaskDataset",
    "TaskData",
    "VariationalState",
    "FitConfig",
    "FitResult",
    "cavi_fit",
    "fit_bayes_cv",
    "predict_proba",
    "predict_proba_interval",
    "generate",
    "get_scenario",
    "list_scenarios",
]
