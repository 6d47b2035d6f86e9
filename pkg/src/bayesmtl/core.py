"""Data containers, priors, variational parameters and the model log joint."""

from __future__ import annotations

import hashlib
import math
from dataclasses import dataclass, field
from functools import cached_property
from typing import Optional, Sequence

import numpy as np

from . import linalg
from .errors import DomainError, ShapeError
from .special import log_gamma


def sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * np.asarray(x, dtype=float)))


def log1pexp(x):
    """Numerically stable log(1 + exp(x))."""
    return np.logaddexp(0.0, x)


def _frozen(a, dtype=float):
    a = np.array(a, dtype=dtype, copy=True)
    a.setflags(write=False)
    return a


@dataclass(frozen=True, eq=False)
class TaskData:
    design: np.ndarray
    labels: np.ndarray
    task_id: str = ""

    def __post_init__(self):
        X = np.asarray(self.design, dtype=float)
        if X.ndim == 1:
            X = X.reshape(1, -1)
        if X.ndim != 2:
            raise ShapeError(f"design must be 2-D, got shape {X.shape}")
        y = np.asarray(self.labels)
        if y.ndim != 1 or y.shape[0] != X.shape[0]:
            raise ShapeError(
                f"task {self.task_id!r}: {X.shape[0]} design rows but labels of shape {y.shape}"
            )
        if X.shape[0] < 1:
            raise ShapeError(f"task {self.task_id!r} has no samples")
        if not np.all(np.isfinite(X)):
            raise DomainError(f"task {self.task_id!r}: design has non-finite entries")
        if not np.all((y == 0) | (y == 1)):
            raise DomainError(f"task {self.task_id!r}: labels must be 0 or 1")
        object.__setattr__(self, "design", _frozen(X))
        object.__setattr__(self, "labels", _frozen(y, dtype=float))
        object.__setattr__(self, "task_id", str(self.task_id))

    @property
    def n(self):
        return self.design.shape[0]


@dataclass(frozen=True, eq=False)
class MultitaskDataset:
    """Ordered tasks sharing one feature space of dimension ``d``."""

    tasks: tuple
    feature_names: Optional[tuple] = None

    def __post_init__(self):
        tasks = tuple(self.tasks)
        if not tasks:
            raise ShapeError("dataset needs at least one task")
        d = tasks[0].design.shape[1]
        for task in tasks:
            if task.design.shape[1] != d:
                raise ShapeError(
                    f"task {task.task_id!r} has {task.design.shape[1]} features, expected {d}"
                )
        object.__setattr__(self, "tasks", tasks)
        if self.feature_names is not None:
            names = tuple(str(s) for s in self.feature_names)
            if len(names) != d:
                raise ShapeError(f"{len(names)} feature names for {d} features")
            object.__setattr__(self, "feature_names", names)

    @classmethod
    def from_arrays(cls, designs, labels, task_ids=None, feature_names=None):
        if task_ids is None:
            task_ids = [f"task{t}" for t in range(len(designs))]
        tasks = [TaskData(X, y, tid) for X, y, tid in zip(designs, labels, task_ids)]
        return cls(tuple(tasks), feature_names)

    @property
    def d(self):
        return self.tasks[0].design.shape[1]

    @property
    def T(self):
        return len(self.tasks)

    @property
    def n_per_task(self):
        return tuple(task.n for task in self.tasks)

    @property
    def task_ids(self):
        return tuple(task.task_id for task in self.tasks)

    @property
    def names(self):
        if self.feature_names is not None:
            return self.feature_names
        return tuple(f"x{j}" for j in range(self.d))

    @cached_property
    def X(self):
        """All design rows stacked task-major, shape (N, d)."""
        return _frozen(np.vstack([task.design for task in self.tasks]))

    @cached_property
    def y(self):
        return _frozen(np.concatenate([task.labels for task in self.tasks]))

    @cached_property
    def task_index(self):
        idx = np.concatenate([np.full(task.n, t) for t, task in enumerate(self.tasks)])
        return _frozen(idx, dtype=np.intp)

    @cached_property
    def sq_sums(self):
        """Per-task column sums of squared features, shape (T, d)."""
        return _frozen(np.stack([np.sum(task.design**2, axis=0) for task in self.tasks]))

    def subset(self, rows_per_task):
        """New dataset keeping the given row indices of every task.

        Tasks whose index list is empty are dropped.
        """
        tasks = []
        for task, rows in zip(self.tasks, rows_per_task):
            rows = np.asarray(rows, dtype=np.intp)
            if rows.size:
                tasks.append(TaskData(task.design[rows], task.labels[rows], task.task_id))
        return MultitaskDataset(tuple(tasks), self.feature_names)

    def fingerprint(self):
        h = hashlib.sha256()
        for task in self.tasks:
            h.update(task.task_id.encode())
            h.update(np.ascontiguousarray(task.design, dtype="<f8").tobytes())
            h.update(np.ascontiguousarray(task.labels, dtype="<f8").tobytes())
        for name in self.names:
            h.update(name.encode())
        return h.hexdigest()


@dataclass(frozen=True, eq=False)
class Hyperparameters:
    alpha0: float
    beta0: float
    v0: float
    V0: np.ndarray

    def __post_init__(self):
        V0 = np.atleast_2d(np.asarray(self.V0, dtype=float))
        if V0.shape[0] != V0.shape[1]:
            raise ShapeError(f"V0 must be square, got {V0.shape}")
        if not (self.alpha0 > 0 and self.beta0 > 0):
            raise DomainError("alpha0 and beta0 must be positive")
        T = V0.shape[0]
        if not self.v0 > T - 1:
            raise DomainError(f"v0 must exceed T - 1 = {T - 1}, got {self.v0}")
        if np.max(np.abs(V0 - V0.T)) > 1e-12:
            raise DomainError("V0 must be symmetric")
        linalg.cholesky(V0)
        object.__setattr__(self, "alpha0", float(self.alpha0))
        object.__setattr__(self, "beta0", float(self.beta0))
        object.__setattr__(self, "v0", float(self.v0))
        object.__setattr__(self, "V0", _frozen(V0))

    @property
    def T(self):
        return self.V0.shape[0]

    @classmethod
    def default(cls, T, alpha0=1.0, beta0=1.0, v0=None, V0_scale=1.0):
        return cls(alpha0, beta0, T + 2.0 if v0 is None else v0, V0_scale * np.eye(T))

    def to_dict(self):
        return {
            "alpha0": self.alpha0,
            "beta0": self.beta0,
            "v0": self.v0,
            "V0": self.V0.tolist(),
        }


@dataclass(frozen=True, eq=False)
class VariationalState:
    """Parameters of the mean-field posterior.

    ``M`` has shape (T, d) with column j the mean of w_(j); ``Sigmas`` has
    shape (d, T, T).
    """

    alpha: float
    beta: float
    v: float
    V: np.ndarray
    phi: np.ndarray
    M: np.ndarray
    Sigmas: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "alpha", float(self.alpha))
        object.__setattr__(self, "beta", float(self.beta))
        object.__setattr__(self, "v", float(self.v))
        for name in ("V", "phi", "M", "Sigmas"):
            object.__setattr__(self, name, _frozen(getattr(self, name)))
        T, d = self.M.shape
        if self.V.shape != (T, T) or self.phi.shape != (d,) or self.Sigmas.shape != (d, T, T):
            raise ShapeError(
                f"inconsistent state shapes: M {self.M.shape}, V {self.V.shape}, "
                f"phi {self.phi.shape}, Sigmas {self.Sigmas.shape}"
            )

    @property
    def T(self):
        return self.M.shape[0]

    @property
    def d(self):
        return self.M.shape[1]

    @property
    def effective_weights(self):
        """Posterior mean of w_t * z, shape (T, d)."""
        return self.M * self.phi

    def replace(self, **changes):
        fields = dict(
            alpha=self.alpha, beta=self.beta, v=self.v, V=self.V,
            phi=self.phi, M=self.M, Sigmas=self.Sigmas,
        )
        fields.update(changes)
        return VariationalState(**fields)

    def validate(self):
        if not (self.alpha > 0 and self.beta > 0):
            raise DomainError("alpha and beta must be positive")
        if not self.v > self.T - 1:
            raise DomainError("v must exceed T - 1")
        if np.any(self.phi < 0) or np.any(self.phi > 1):
            raise DomainError("phi must lie in [0, 1]")
        linalg.cholesky(self.V)
        for S in self.Sigmas:
            linalg.cholesky(S)


@dataclass(frozen=True, eq=False)
class LatentSample:
    """One joint value of the model's latent variables."""

    W: np.ndarray
    z: np.ndarray
    theta: float
    Sigma0_inv: np.ndarray = field(default=None)

    def __post_init__(self):
        W = np.atleast_2d(np.asarray(self.W, dtype=float))
        z = np.asarray(self.z, dtype=float)
        if z.shape != (W.shape[1],):
            raise ShapeError(f"z has shape {z.shape}, expected ({W.shape[1]},)")
        if not np.all((z == 0) | (z == 1)):
            raise DomainError("z must be binary")
        if not 0.0 < self.theta < 1.0:
            raise DomainError("theta must lie in (0, 1)")
        P = self.Sigma0_inv
        P = np.eye(W.shape[0]) if P is None else np.atleast_2d(np.asarray(P, dtype=float))
        if P.shape != (W.shape[0], W.shape[0]):
            raise ShapeError(f"Sigma0_inv has shape {P.shape}, expected {(W.shape[0],) * 2}")
        object.__setattr__(self, "W", _frozen(W))
        object.__setattr__(self, "z", _frozen(z))
        object.__setattr__(self, "theta", float(self.theta))
        object.__setattr__(self, "Sigma0_inv", _frozen(P))


def _check_joint_shapes(sample, data, hyper):
    T, d = sample.W.shape
    if data.T != T or data.d != d:
        raise ShapeError(f"sample is {T}x{d} but data has T={data.T}, d={data.d}")
    if hyper.T != T:
        raise ShapeError(f"V0 is {hyper.T}x{hyper.T} but there are {T} tasks")


def log_joint(sample: LatentSample, data: MultitaskDataset, hyper: Hyperparameters) -> float:
    """Log joint density of labels and latents given the features.

    Additive constants are exactly those of the model's printed form: the
    Wishart and Gaussian normalizers beyond the log-determinants are dropped.
    """
    _check_joint_shapes(sample, data, hyper)
    T, d = sample.W.shape
    P = sample.Sigma0_inv
    theta = sample.theta
    V0 = hyper.V0
    V0_inv = linalg.spd_inverse(V0)
    logdet_P = linalg.logdet(P)

    out = -0.5 * np.trace(V0_inv @ P)
    out += 0.5 * (hyper.v0 + d - T - 1) * logdet_P
    out -= 0.5 * hyper.v0 * linalg.logdet(V0)
    out += (hyper.alpha0 - 1) * math.log(theta) + (hyper.beta0 - 1) * math.log1p(-theta)
    out += log_gamma(hyper.alpha0 + hyper.beta0) - log_gamma(hyper.alpha0) - log_gamma(hyper.beta0)
    out -= 0.5 * np.sum(sample.W * (P @ sample.W))

    Wz = sample.W * sample.z
    eta = np.sum(data.X * Wz[data.task_index], axis=1)
    out += np.sum(data.y * eta) - np.sum(log1pexp(eta))

    nz = np.sum(sample.z)
    out += nz * math.log(theta) + (d - nz) * math.log1p(-theta)
    return float(out)


def grad_log_joint_W(sample: LatentSample, data: MultitaskDataset, hyper: Hyperparameters):
    """Gradient of ``log_joint`` with respect to W, holding z, theta, Sigma0 fixed."""
    _check_joint_shapes(sample, data, hyper)
    linalg.cholesky(sample.Sigma0_inv)
    Wz = sample.W * sample.z
    eta = np.sum(data.X * Wz[data.task_index], axis=1)
    resid = data.y - sigmoid(eta)
    grad = np.zeros_like(sample.W)
    np.add.at(grad, data.task_index, resid[:, None] * data.X)
    grad *= sample.z
    grad -= sample.Sigma0_inv @ sample.W
    return grad
