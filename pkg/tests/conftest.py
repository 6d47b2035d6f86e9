import numpy as np
import pytest

from bayesmtl.core import Hyperparameters, MultitaskDataset, TaskData, VariationalState


def random_dataset(rng, T, d, n_max=8, n_min=2):
    tasks = []
    for t in range(T):
        n = int(rng.integers(n_min, n_max + 1))
        X = rng.normal(size=(n, d))
        y = np.zeros(n)
        y[rng.permutation(n)[: max(1, n // 2)]] = 1.0
        tasks.append(TaskData(X, y, f"task{t}"))
    return MultitaskDataset(tuple(tasks))


def random_spd(rng, T, scale=1.0):
    A = rng.normal(size=(T, T))
    return scale * (A @ A.T / T + 0.5 * np.eye(T))


def random_hyper(rng, T):
    return Hyperparameters(
        alpha0=float(rng.uniform(0.5, 5)),
        beta0=float(rng.uniform(0.5, 5)),
        v0=T + 1 + float(rng.uniform(0.5, 3)),
        V0=random_spd(rng, T),
    )


def random_state(rng, T, d):
    return VariationalState(
        alpha=float(rng.uniform(1, 10)),
        beta=float(rng.uniform(1, 10)),
        v=T + 1 + float(rng.uniform(1, 10)),
        V=random_spd(rng, T, 0.3),
        phi=rng.uniform(0.05, 0.95, size=d),
        M=rng.normal(size=(T, d)),
        Sigmas=np.stack([random_spd(rng, T, 0.2) for _ in range(d)]),
    )


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


# one line per acceptance criterion, shown after the test run
ACCEPTANCE_LINES = {}


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for key in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(ACCEPTANCE_LINES[key])
