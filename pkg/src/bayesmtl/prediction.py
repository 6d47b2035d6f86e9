"""Predictions, posterior draws and derived feature summaries from a fitted model."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import linalg
from .core import MultitaskDataset, VariationalState, sigmoid
from .errors import DomainError, ShapeError


def _state(model):
    return model.state if hasattr(model, "state") else model


def _check_X(state, task_index, X):
    if not 0 <= task_index < state.T:
        raise ShapeError(f"task index {task_index} out of range for T={state.T}")
    X = np.atleast_2d(np.asarray(X, dtype=float))
    if X.shape[1] != state.d:
        raise ShapeError(f"X has {X.shape[1]} columns, model has d={state.d}")
    return X


def predict_proba(model, task_index: int, X):
    """Plug-in probability sigmoid(<m_t * phi, x>) for every row of ``X``."""
    state = _state(model)
    X = _check_X(state, task_index, X)
    return sigmoid(X @ (state.M[task_index] * state.phi))


@dataclass(frozen=True, eq=False)
class PosteriorDraws:
    """``W_draws`` has shape (S, T, d); ``z_draws`` (S, d); ``theta_draws`` (S,)."""

    W_draws: np.ndarray
    z_draws: np.ndarray
    theta_draws: np.ndarray
    seed: int

    @property
    def S(self):
        return self.theta_draws.shape[0]

    @property
    def effective(self):
        return self.W_draws * self.z_draws[:, None, :]


def sample_posterior(model, S: int, seed: int = 0) -> PosteriorDraws:
    """Independent draws from the factorized variational posterior."""
    if S < 1:
        raise ValueError("S must be at least 1")
    state = _state(model)
    rng = np.random.default_rng(seed)
    T, d = state.T, state.d
    chol = np.stack([linalg.cholesky(Sig) for Sig in state.Sigmas])  # (d, T, T)
    eps = rng.standard_normal((S, d, T))
    W = state.M.T[None] + np.einsum("jab,sjb->sja", chol, eps)
    z = (rng.random((S, d)) < state.phi).astype(float)
    theta = rng.beta(state.alpha, state.beta, size=S)
    return PosteriorDraws(np.swapaxes(W, 1, 2).copy(), z, theta, seed)


def draw_probabilities(draws: PosteriorDraws, task_index: int, X):
    """Matrix (S, n) of sigmoid(<w_t * z, x>) over posterior draws."""
    Wz = draws.W_draws[:, task_index, :] * draws.z_draws
    return sigmoid(Wz @ np.asarray(X, dtype=float).T)


def predict_proba_interval(model, task_index, X, S=1000, level=0.9, seed=0, point="plugin"):
    """Central credible band of predicted probabilities.

    Returns (lower, point, upper) arrays. ``point="plugin"`` uses the
    plug-in prediction; ``point="mean"`` the Monte Carlo average.
    """
    if not 0.0 < level < 1.0:
        raise DomainError("level must lie in (0, 1)")
    state = _state(model)
    X = _check_X(state, task_index, X)
    probs = draw_probabilities(sample_posterior(state, S, seed), task_index, X)
    lo = np.quantile(probs, (1.0 - level) / 2.0, axis=0)
    hi = np.quantile(probs, (1.0 + level) / 2.0, axis=0)
    if point == "plugin":
        mid = predict_proba(state, task_index, X)
    elif point == "mean":
        mid = probs.mean(axis=0)
    else:
        raise ValueError("point must be 'plugin' or 'mean'")
    return lo, mid, hi


def importance_vectors(Wz_t, X):
    """Unit-norm contributions |w_j z_j x_j| / ||w * z * x|| for each draw and row.

    ``Wz_t`` has shape (S, d), ``X`` (n, d); the result is (S, n, d). Rows
    whose contributions are all zero stay zero.
    """
    contrib = np.abs(Wz_t[:, None, :] * X[None, :, :])
    norm = np.sqrt(np.sum(contrib**2, axis=-1, keepdims=True))
    with np.errstate(invalid="ignore", divide="ignore"):
        out = np.where(norm > 0, contrib / norm, 0.0)
    return out


@dataclass(frozen=True, eq=False)
class ImportanceReport:
    per_task: tuple  # one (S, n_t, d) array per task
    quantile_levels: tuple
    mean: np.ndarray  # (d,)
    quantiles: np.ndarray  # (len(quantile_levels), d)


def feature_importance(model, data: MultitaskDataset, S=200, seed=0, quantile_levels=(0.05, 0.5, 0.95)):
    """Relative contribution of each feature to the predicted log-odds,
    for every task, sample and posterior draw."""
    state = _state(model)
    if data.d != state.d or data.T != state.T:
        raise ShapeError("data dimensions do not match the model")
    draws = sample_posterior(state, S, seed)
    Wz = draws.effective
    per_task = tuple(importance_vectors(Wz[:, t, :], task.design) for t, task in enumerate(data.tasks))
    flat = np.concatenate([a.reshape(-1, state.d) for a in per_task])
    return ImportanceReport(
        per_task=per_task,
        quantile_levels=tuple(quantile_levels),
        mean=flat.mean(axis=0),
        quantiles=np.quantile(flat, quantile_levels, axis=0),
    )


def sparsity_coefficients(model, S=1000, seed=0, reduce="max"):
    """(S, d) matrix of z_j times the largest (or mean) |w_tj| over tasks, per draw."""
    draws = sample_posterior(_state(model), S, seed)
    mag = np.abs(draws.W_draws)
    if reduce == "max":
        agg = mag.max(axis=1)
    elif reduce == "mean":
        agg = mag.mean(axis=1)
    else:
        raise ValueError("reduce must be 'max' or 'mean'")
    return draws.z_draws * agg
