"""Synthetic multitask benchmarks with known sparse weights.

Six presets cross three support densities with balanced or imbalanced task
sizes. Balanced tasks draw n_t ~ Poisson(24); imbalanced tasks draw
n_t = 6 * NegBin(r=1, p=0.04), where NegBin counts failures before the r-th
success. Note the imbalanced mean is 6 * 24 = 144, not 30.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from .core import MultitaskDataset, TaskData, sigmoid
from .errors import GenerationError

MIN_TASK_SIZE = 2
MAX_LABEL_ATTEMPTS = 100


@dataclass(frozen=True)
class Scenario:
    name: str
    theta: float
    balance: str
    d: int = 100
    T: int = 10
    seed: int = 0

    def __post_init__(self):
        if not 0.0 < self.theta <= 1.0:
            raise ValueError("theta must lie in (0, 1]")
        if self.d < 1 or self.T < 1:
            raise ValueError("d and T must be positive")
        if self.balance not in ("balanced", "imbalanced"):
            raise ValueError("balance must be 'balanced' or 'imbalanced'")

    def with_seed(self, seed):
        return replace(self, seed=seed)


@dataclass(frozen=True, eq=False)
class GroundTruth:
    W0: np.ndarray
    z0: np.ndarray
    theta0: float
    Sigma0: np.ndarray = field(default=None)

    @property
    def effective_weights(self):
        return self.W0 * self.z0


_PRESETS = (
    ("dataset1", 0.8, "balanced"),
    ("dataset2", 0.2, "balanced"),
    ("dataset3", 0.05, "balanced"),
    ("dataset4", 0.8, "imbalanced"),
    ("dataset5", 0.2, "imbalanced"),
    ("dataset6", 0.05, "imbalanced"),
)


def list_scenarios():
    return [Scenario(name, theta, balance) for name, theta, balance in _PRESETS]


def get_scenario(name, **overrides):
    for sc in list_scenarios():
        if sc.name == name:
            return replace(sc, **overrides)
    raise KeyError(f"unknown scenario {name!r}; choose from {[p[0] for p in _PRESETS]}")


def _task_size(rng, balance):
    while True:
        if balance == "balanced":
            n = int(rng.poisson(24))
        else:
            n = 6 * int(rng.negative_binomial(1, 0.04))
        if n >= MIN_TASK_SIZE:
            return n


def generate(scenario: Scenario, Sigma0=None):
    """Draw a dataset and its generating parameters; deterministic in ``scenario.seed``."""
    rng = np.random.default_rng(scenario.seed)
    T, d = scenario.T, scenario.d
    Sigma0 = np.eye(T) if Sigma0 is None else np.asarray(Sigma0, dtype=float)

    z0 = (rng.random(d) < scenario.theta).astype(float)
    W0 = rng.multivariate_normal(np.zeros(T), Sigma0, size=d).T
    Wz = W0 * z0

    tasks = []
    for t in range(T):
        n = _task_size(rng, scenario.balance)
        X = rng.standard_normal((n, d))
        p = sigmoid(X @ Wz[t])
        for _ in range(MAX_LABEL_ATTEMPTS):
            y = (rng.random(n) < p).astype(float)
            if 0 < y.sum() < n:
                break
        else:
            raise GenerationError(
                f"{scenario.name} seed={scenario.seed}: task {t} (n={n}) stayed single-class "
                f"after {MAX_LABEL_ATTEMPTS} label draws; p range [{p.min():.3g}, {p.max():.3g}]"
            )
        tasks.append(TaskData(X, y, f"task{t}"))

    names = tuple(f"f{j}" for j in range(d))
    truth = GroundTruth(W0=W0, z0=z0, theta0=scenario.theta, Sigma0=Sigma0)
    return MultitaskDataset(tuple(tasks), names), truth
