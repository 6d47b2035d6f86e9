"""Hyperparameter grids and cross-validated fitting of the Bayesian model."""

from __future__ import annotations

import itertools

import numpy as np

from .baselines import CVConfig
from .core import Hyperparameters, MultitaskDataset
from .inference import FitConfig, cavi_fit
from .metrics import cross_validate
from .prediction import predict_proba

PRIOR_MEANS = (0.05, 0.2, 0.5)
CONCENTRATIONS = (2.0, 20.0)
V0_SCALES = (1.0, 0.1)


def default_hyper_grid(T):
    """Prior inclusion mean x concentration x V0 scale, with v0 = T + 2."""
    grid = []
    for mean, conc, scale in itertools.product(PRIOR_MEANS, CONCENTRATIONS, V0_SCALES):
        grid.append(Hyperparameters(mean * conc, (1.0 - mean) * conc, T + 2.0, scale * np.eye(T)))
    return grid


def bayes_fit_predict(config: FitConfig):
    def fit_predict(train, hyper, test):
        result = cavi_fit(train, hyper, config)
        return [predict_proba(result, t, X) for t, X in test]

    return fit_predict


def fit_bayes_cv(data: MultitaskDataset, grid=None, config: FitConfig = FitConfig(), cv: CVConfig = CVConfig()):
    """Select hyperparameters by repeated stratified CV, then refit on all data.

    Returns (FitResult, Hyperparameters, CVReport or None).
    """
    grid = list(grid) if grid is not None else default_hyper_grid(data.T)
    report = None
    hyper = grid[0]
    if len(grid) > 1:
        report = cross_validate(data, grid, bayes_fit_predict(config), cv.repeats, cv.folds, cv.seed)
        hyper = report.best
    return cavi_fit(data, hyper, config), hyper, report
