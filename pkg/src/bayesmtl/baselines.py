"""L1-penalized logistic regression baselines: one model per task, or one
model on all tasks pooled."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .core import MultitaskDataset, log1pexp, sigmoid
from .errors import DomainError
from .metrics import cross_validate

SELECT_TOL = 1e-8


@dataclass(frozen=True)
class L1Config:
    max_iter: int = 10000
    tol: float = 1e-8
    fista: bool = False
    step0: float = 1.0


@dataclass(frozen=True)
class CVConfig:
    repeats: int = 10
    folds: int = 5
    seed: int = 0


@dataclass(frozen=True, eq=False)
class L1LogisticModel:
    weights: np.ndarray
    intercept: float
    lam: float
    task_scope: str = "pooled"
    objective_trace: tuple = field(default=(), repr=False)

    def decision_function(self, X):
        return np.asarray(X, dtype=float) @ self.weights + self.intercept

    def predict_proba(self, X):
        return sigmoid(self.decision_function(X))

    @property
    def selected(self):
        return np.abs(self.weights) > SELECT_TOL


def soft_threshold(u, thresh):
    return np.sign(u) * np.maximum(np.abs(u) - thresh, 0.0)


def _smooth_loss(X, y, w, b):
    eta = X @ w + b
    return float(np.mean(log1pexp(eta) - y * eta))


def lambda_max(X, y):
    """Smallest penalty at which the all-zero weight vector is optimal."""
    X = np.asarray(X, dtype=float)
    y = np.asarray(y, dtype=float)
    return float(np.max(np.abs(X.T @ (y - y.mean()))) / X.shape[0])


def fit_l1_logistic(X, y, lam, config: L1Config = L1Config(), task_scope="pooled") -> L1LogisticModel:
    """Minimize mean logistic loss + lam * ||w||_1 (intercept unpenalized)
    by proximal gradient with backtracking line search."""
    X = np.asarray(X, dtype=float)
    y = np.asarray(y, dtype=float)
    if lam < 0:
        raise DomainError("lambda must be non-negative")
    ybar = y.mean()
    if ybar in (0.0, 1.0):
        raise DomainError("L1 logistic regression needs both classes")
    n, d = X.shape
    w = np.zeros(d)
    b = float(np.log(ybar / (1.0 - ybar)))
    step = config.step0
    obj = _smooth_loss(X, y, w, b) + lam * np.abs(w).sum()
    trace = [obj]
    # FISTA extrapolation state
    w_prev, b_prev, t_k = w, b, 1.0
    for _ in range(config.max_iter):
        if config.fista:
            t_next = 0.5 * (1.0 + np.sqrt(1.0 + 4.0 * t_k * t_k))
            mom = (t_k - 1.0) / t_next
            yw, yb = w + mom * (w - w_prev), b + mom * (b - b_prev)
        else:
            yw, yb = w, b
        resid = sigmoid(X @ yw + yb) - y
        gw = X.T @ resid / n
        gb = float(resid.mean())
        f_y = _smooth_loss(X, y, yw, yb)
        while True:
            w_new = soft_threshold(yw - step * gw, step * lam)
            b_new = yb - step * gb
            dw, db = w_new - yw, b_new - yb
            f_new = _smooth_loss(X, y, w_new, b_new)
            if f_new <= f_y + gw @ dw + gb * db + (dw @ dw + db * db) / (2.0 * step) + 1e-15:
                break
            step *= 0.5
        new_obj = f_new + lam * np.abs(w_new).sum()
        if config.fista and new_obj > obj:
            # restart momentum so the objective never increases
            t_k = 1.0
            w_prev, b_prev = w, b
            continue
        w_prev, b_prev = w, b
        w, b = w_new, b_new
        if config.fista:
            t_k = t_next
        converged = abs(obj - new_obj) <= config.tol * max(abs(obj), 1e-300)
        obj = new_obj
        trace.append(obj)
        if converged:
            break
    return L1LogisticModel(w, float(b), float(lam), task_scope, tuple(trace))


def default_lambda_grid(X, y, n=10, ratio=0.01):
    """Geometric grid from lambda_max down to ratio * lambda_max."""
    top = lambda_max(X, y)
    return tuple(np.geomspace(top, ratio * top, n))


def _select_lambda(data, grid, cv_config, l1_config, pooled):
    grid = tuple(float(g) for g in grid)
    if len(grid) == 1:
        return grid[0], None

    def fit_predict(train, lam, test):
        if pooled:
            model = fit_l1_logistic(train.X, train.y, lam, l1_config)
            return [model.predict_proba(X) for _, X in test]
        models = [fit_l1_logistic(task.design, task.labels, lam, l1_config) for task in train.tasks]
        return [models[t].predict_proba(X) for t, X in test]

    report = cross_validate(data, grid, fit_predict, cv_config.repeats, cv_config.folds, cv_config.seed)
    return report.best, report


def fit_stl(
    data: MultitaskDataset,
    lambda_grid=None,
    cv_config: CVConfig = CVConfig(),
    l1_config: L1Config = L1Config(),
    per_task=False,
):
    """Independent L1 logistic model per task.

    By default one penalty is shared by all tasks and chosen by a single
    cross-validation over the multitask data; the default grid runs from the
    largest per-task lambda_max down by a factor of 100. With
    ``per_task=True`` each task gets its own grid and cross-validation.

    Returns (models, reports): one report overall, or one per task (None
    where no selection ran).
    """
    if per_task:
        models, reports = [], []
        for task in data.tasks:
            single = MultitaskDataset((task,), data.feature_names)
            grid = lambda_grid if lambda_grid is not None else default_lambda_grid(task.design, task.labels)
            lam, report = _select_lambda(single, grid, cv_config, l1_config, pooled=False)
            models.append(fit_l1_logistic(task.design, task.labels, lam, l1_config, task_scope=task.task_id))
            reports.append(report)
        return models, reports
    if lambda_grid is None:
        top = max(lambda_max(task.design, task.labels) for task in data.tasks)
        lambda_grid = tuple(np.geomspace(top, 0.01 * top, 10))
    lam, report = _select_lambda(data, lambda_grid, cv_config, l1_config, pooled=False)
    models = [fit_l1_logistic(t.design, t.labels, lam, l1_config, task_scope=t.task_id) for t in data.tasks]
    return models, report


def fit_pooled(data: MultitaskDataset, lambda_grid=None, cv_config: CVConfig = CVConfig(), l1_config: L1Config = L1Config()):
    """One L1 logistic model on the rows of all tasks concatenated."""
    grid = lambda_grid if lambda_grid is not None else default_lambda_grid(data.X, data.y)
    lam, report = _select_lambda(data, grid, cv_config, l1_config, pooled=True)
    return fit_l1_logistic(data.X, data.y, lam, l1_config, task_scope="pooled"), report


def stacked_weights(models, T=None):
    """(T, d) weight matrix; a pooled model is repeated for each of the T tasks."""
    if isinstance(models, L1LogisticModel):
        return np.tile(models.weights, (T or 1, 1))
    return np.stack([m.weights for m in models])
