"""Classification metrics, recovery scores, calibration and cross-validation."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .core import MultitaskDataset
from .errors import DomainError, ShapeError

METRIC_NAMES = (
    "accuracy",
    "balanced_accuracy",
    "average_precision",
    "precision",
    "recall",
    "f1",
    "f2",
    "mcc",
)

# Column labels used in report CSVs.
METRIC_LABELS = {
    "accuracy": "Accuracy",
    "balanced_accuracy": "Balanced Accuracy",
    "average_precision": "Average Precision",
    "precision": "Precision",
    "recall": "Recall",
    "f1": "F1 Score",
    "f2": "F2 Score",
    "mcc": "MCC",
}


@dataclass(frozen=True)
class ConfusionCounts:
    tp: int
    tn: int
    fp: int
    fn: int

    @property
    def n(self):
        return self.tp + self.tn + self.fp + self.fn


def _binary(a, name):
    a = np.asarray(a)
    if a.ndim != 1:
        raise ShapeError(f"{name} must be a vector")
    if not np.all((a == 0) | (a == 1)):
        raise DomainError(f"{name} must be binary")
    return a.astype(bool)


def confusion(y, yhat) -> ConfusionCounts:
    y = _binary(y, "y")
    yhat = _binary(yhat, "yhat")
    if y.shape != yhat.shape:
        raise ShapeError(f"length mismatch: {y.shape[0]} labels vs {yhat.shape[0]} predictions")
    return ConfusionCounts(
        tp=int(np.sum(y & yhat)),
        tn=int(np.sum(~y & ~yhat)),
        fp=int(np.sum(~y & yhat)),
        fn=int(np.sum(y & ~yhat)),
    )


def _ratio(num, den):
    return num / den if den else 0.0


def metric(counts: ConfusionCounts, which: str) -> float:
    """Evaluate one named metric; zero denominators give 0."""
    tp, tn, fp, fn = counts.tp, counts.tn, counts.fp, counts.fn
    precision = _ratio(tp, tp + fp)
    recall = _ratio(tp, tp + fn)
    if which == "accuracy":
        return _ratio(tp + tn, counts.n)
    if which == "balanced_accuracy":
        return 0.5 * (recall + _ratio(tn, tn + fp))
    if which == "precision":
        return precision
    if which == "recall":
        return recall
    if which == "f1":
        return _ratio(2 * precision * recall, precision + recall)
    if which == "f2":
        return _ratio(5 * precision * recall, 4 * precision + recall)
    if which == "mcc":
        den = (tp + fp) * (tp + fn) * (tn + fp) * (tn + fn)
        if den == 0:
            return 0.0
        return (tp * tn - fp * fn) / math.sqrt(den)
    raise ValueError(f"unknown metric {which!r}")


def average_precision(y, scores) -> float:
    """Step-wise average precision: sum over distinct score thresholds of
    (recall gain) * (precision at that threshold). Tied scores enter together."""
    y = _binary(y, "y")
    scores = np.asarray(scores, dtype=float)
    if scores.shape != y.shape:
        raise ShapeError("y and scores must have equal length")
    n_pos = int(y.sum())
    if n_pos == 0:
        raise DomainError("average precision needs at least one positive label")
    order = np.argsort(-scores, kind="stable")
    s, yy = scores[order], y[order]
    # last index of every block of tied scores
    ends = np.flatnonzero(np.r_[s[1:] != s[:-1], True])
    tps = np.cumsum(yy)[ends]
    predicted = ends + 1
    precision = tps / predicted
    recall = tps / n_pos
    gains = np.diff(np.r_[0.0, recall])
    return float(np.sum(gains * precision))


def classification_report(y, yhat, scores=None) -> dict:
    """All metrics of ``METRIC_NAMES``; average precision needs ``scores``
    and a positive label, else it is NaN."""
    counts = confusion(y, yhat)
    out = {name: metric(counts, name) for name in METRIC_NAMES if name != "average_precision"}
    ap = float("nan")
    if scores is not None and np.any(np.asarray(y) == 1):
        ap = average_precision(y, scores)
    out["average_precision"] = ap
    return {name: out[name] for name in METRIC_NAMES}


def support_recovery_score(phi, z0, threshold=0.5) -> dict:
    """Score ``phi >= threshold`` as a prediction of the true support ``z0``.
    Average precision uses ``phi`` itself as the ranking score."""
    if not 0.0 < threshold < 1.0:
        raise DomainError("threshold must lie in (0, 1)")
    phi = np.asarray(phi, dtype=float)
    return classification_report(z0, (phi >= threshold).astype(int), scores=phi)


def cosine_distance(a, b) -> float:
    a = np.ravel(np.asarray(a, dtype=float))
    b = np.ravel(np.asarray(b, dtype=float))
    if a.shape != b.shape:
        raise ShapeError("vectors differ in length")
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na == 0 or nb == 0:
        raise DomainError("cosine distance is undefined for a zero vector")
    return float(np.clip(1.0 - (a @ b) / (na * nb), 0.0, 2.0))


def sparsity_ratio(W_effective, tol=0.0) -> float:
    if tol < 0:
        raise DomainError("tol must be non-negative")
    W = np.asarray(W_effective, dtype=float)
    return float(np.mean(np.abs(W) <= tol))


def bayes_sparse_weights(state, threshold=0.5):
    """Posterior means with deselected features zeroed: m_tj * [phi_j >= threshold]."""
    return state.M * (state.phi >= threshold)


@dataclass(frozen=True, eq=False)
class CalibrationCurve:
    bin_edges: np.ndarray
    mean_predicted: np.ndarray
    observed_frequency: np.ndarray
    counts: np.ndarray

    @property
    def nonempty(self):
        return self.counts > 0


def calibration_curve(y, probs, bins=10) -> CalibrationCurve:
    """Equal-width reliability bins on [0, 1]. Empty bins report NaN."""
    y = _binary(y, "y").astype(float)
    probs = np.asarray(probs, dtype=float)
    if probs.shape != y.shape:
        raise ShapeError("y and probs must have equal length")
    if np.any((probs < 0) | (probs > 1)):
        raise DomainError("probabilities must lie in [0, 1]")
    edges = np.linspace(0.0, 1.0, bins + 1)
    idx = np.clip(np.searchsorted(edges, probs, side="right") - 1, 0, bins - 1)
    counts = np.bincount(idx, minlength=bins)
    sum_p = np.bincount(idx, weights=probs, minlength=bins)
    sum_y = np.bincount(idx, weights=y, minlength=bins)
    with np.errstate(invalid="ignore", divide="ignore"):
        mean_p = np.where(counts > 0, sum_p / counts, np.nan)
        freq = np.where(counts > 0, sum_y / counts, np.nan)
    return CalibrationCurve(edges, mean_p, freq, counts)


def cross_entropy(y, p, eps=1e-15) -> float:
    """Mean binary cross-entropy."""
    p = np.clip(np.asarray(p, dtype=float), eps, 1.0 - eps)
    y = np.asarray(y, dtype=float)
    return float(-np.mean(y * np.log(p) + (1.0 - y) * np.log1p(-p)))


@dataclass(frozen=True, eq=False)
class CVReport:
    candidates: tuple
    mean_loss: np.ndarray
    std_loss: np.ndarray
    fold_losses: np.ndarray  # (n_candidates, repeats * folds)
    selected: int
    fold_reductions: dict = field(default_factory=dict)

    @property
    def best(self):
        return self.candidates[self.selected]


def stratified_folds(data: MultitaskDataset, folds: int, rng):
    """Per-task fold labels.

    Within each task, samples are shuffled inside their class, the classes are
    concatenated and fold labels assigned round-robin. Every fold therefore
    sees both classes in training whenever each class has at least two
    samples; with ``folds == n`` this is leave-one-out. A task with a class of
    fewer than two samples is kept in training for every fold (label -1) and
    reported in the returned reductions.
    """
    labels = []
    reductions = {}
    for task in data.tasks:
        y = task.labels
        counts = [int(np.sum(y == 0)), int(np.sum(y == 1))]
        assign = np.full(task.n, -1, dtype=int)
        if min(counts) < 2:
            reductions[task.task_id] = f"class counts {counts}: kept in training, never validated"
        else:
            order = np.concatenate([rng.permutation(np.flatnonzero(y == c)) for c in (0, 1)])
            assign[order] = np.arange(task.n) % folds
        labels.append(assign)
    return labels, reductions


def cross_validate(
    data: MultitaskDataset,
    candidates: Sequence,
    fit_predict: Callable,
    repeats: int = 10,
    folds: int = 5,
    seed: int = 0,
) -> CVReport:
    """Repeated stratified cross-validation by validation cross-entropy.

    ``fit_predict(train, candidate, test)`` receives the training dataset
    (all tasks, in order) and ``test``, a list of ``(task_index, X)`` pairs,
    and returns one probability vector per pair. Loss per (repeat, fold) is
    the mean cross-entropy over all validation samples; folds with no
    validation samples are skipped.
    """
    if not candidates:
        raise ValueError("need at least one candidate")
    if folds < 2:
        raise ValueError("folds must be at least 2")
    seeds = np.random.SeedSequence(seed).spawn(repeats)
    losses = [[] for _ in candidates]
    reductions = {}
    for r in range(repeats):
        rng = np.random.default_rng(seeds[r])
        assign, red = stratified_folds(data, folds, rng)
        reductions.update(red)
        for k in range(folds):
            test_rows = [np.flatnonzero(a == k) for a in assign]
            if sum(len(rows) for rows in test_rows) == 0:
                continue
            train_rows = [np.flatnonzero(a != k) for a in assign]
            train = data.subset(train_rows)
            test = [(t, data.tasks[t].design[rows]) for t, rows in enumerate(test_rows) if rows.size]
            y_test = np.concatenate([data.tasks[t].labels[rows] for t, rows in enumerate(test_rows)])
            for c, cand in enumerate(candidates):
                probs = fit_predict(train, cand, test)
                losses[c].append(cross_entropy(y_test, np.concatenate(probs)))
    losses = np.array(losses, dtype=float).reshape(len(candidates), -1)
    if losses.shape[1] == 0:
        reductions["*"] = "no validation samples in any fold; first candidate selected"
        nan = np.full(len(candidates), np.nan)
        return CVReport(tuple(candidates), nan, nan.copy(), losses, 0, reductions)
    mean = losses.mean(axis=1)
    std = losses.std(axis=1)
    selected = int(np.argmin(mean))
    return CVReport(tuple(candidates), mean, std, losses, selected, reductions)
