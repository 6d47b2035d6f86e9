"""Coordinate-ascent variational inference for the sparse multitask model.

The expected log-sigmoid terms of the ELBO are replaced by a quadratic lower
bound with fixed curvature 1/4, expanded around a reference value of w_t * z.
Every closed-form update below maximizes that surrogate exactly when the
reference is the current posterior mean ``M * phi``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import _kernels, linalg
from .core import Hyperparameters, MultitaskDataset, VariationalState, log1pexp, sigmoid
from .errors import DomainError, ShapeError
from .special import digamma, log_beta, multivariate_digamma, multivariate_log_gamma

PHI_CLAMP = 1e-12
INIT_MODES = ("zeros", "small_random")


@dataclass(frozen=True)
class FitConfig:
    max_sweeps: int = 500
    elbo_rel_tol: float = 1e-6
    seed: int = 0
    init_mode: str = "zeros"

    def __post_init__(self):
        if self.max_sweeps < 1:
            raise ValueError("max_sweeps must be at least 1")
        if not self.elbo_rel_tol > 0:
            raise ValueError("elbo_rel_tol must be positive")
        if self.init_mode not in INIT_MODES:
            raise ValueError(f"init_mode must be one of {INIT_MODES}")

    def to_dict(self):
        return {
            "max_sweeps": self.max_sweeps,
            "elbo_rel_tol": self.elbo_rel_tol,
            "seed": self.seed,
            "init_mode": self.init_mode,
        }


@dataclass(frozen=True, eq=False)
class FitResult:
    state: VariationalState
    elbo_trace: tuple
    converged: bool
    sweeps_run: int


def init_state(data: MultitaskDataset, hyper: Hyperparameters, config: FitConfig = FitConfig()):
    T, d = data.T, data.d
    if hyper.T != T:
        raise ShapeError(f"hyperparameters are for {hyper.T} tasks, data has {T}")
    if config.init_mode == "zeros":
        M = np.zeros((T, d))
    else:
        rng = np.random.default_rng(config.seed)
        M = rng.normal(0.0, 0.1, size=(T, d))
    return VariationalState(
        alpha=hyper.alpha0 + d / 2.0,
        beta=hyper.beta0 + d / 2.0,
        v=hyper.v0 + d,
        V=hyper.V0,
        phi=np.full(d, 0.5),
        M=M,
        Sigmas=np.broadcast_to(np.eye(T), (d, T, T)),
    )


def quadratic_bound_gap(wz, ref, x):
    """``-log(1 + exp(<wz, x>))`` minus its quadratic lower bound around ``ref``.

    Non-negative for all inputs; zero when ``wz == ref`` or ``x == 0``.
    """
    wz = np.asarray(wz, dtype=float)
    ref = np.asarray(ref, dtype=float)
    x = np.asarray(x, dtype=float)
    s = float(wz @ x)
    s_ref = float(ref @ x)
    diff = s - s_ref
    bound = -log1pexp(s_ref) - diff * sigmoid(s_ref) - 0.125 * diff * diff
    return float(-log1pexp(s) - bound)


def _bernoulli_entropy(phi):
    p = np.clip(phi, PHI_CLAMP, 1.0 - PHI_CLAMP)
    return float(-np.sum(p * np.log(p) + (1.0 - p) * np.log1p(-p)))


def elbo_global_terms(state: VariationalState, hyper: Hyperparameters) -> float:
    """All ELBO terms that do not touch the data."""
    T, d = state.T, state.d
    v, V = state.v, state.V
    a, b = state.alpha, state.beta
    a0, b0, v0 = hyper.alpha0, hyper.beta0, hyper.v0
    sum_phi = float(np.sum(state.phi))

    out = -0.5 * v * float(np.trace(linalg.spd_inverse(hyper.V0) @ V))
    out += 0.5 * (v0 + d) * linalg.logdet(V)
    out += 0.5 * (v0 + d - v) * multivariate_digamma(v / 2.0, T)
    out += v * T / 2.0 + multivariate_log_gamma(v / 2.0, T)

    out += (a0 + sum_phi - a) * digamma(a) + log_beta(a, b)
    out += (b0 + d - sum_phi - b) * digamma(b)
    out += (a + b - d - a0 - b0) * digamma(a + b)

    second_moment = np.einsum("tj,sj->ts", state.M, state.M) + np.sum(state.Sigmas, axis=0)
    out -= 0.5 * v * float(np.sum(V * second_moment))

    out += 0.5 * float(np.sum(linalg.batch_logdet(state.Sigmas)))
    out += _bernoulli_entropy(state.phi)
    return float(out)


def surrogate_data_terms(state: VariationalState, data: MultitaskDataset, reference=None) -> float:
    """Expected log-likelihood with every log-sigmoid replaced by its quadratic bound.

    ``reference`` is the (T, d) expansion point w' * z'; it defaults to the
    current posterior mean ``M * phi``.
    """
    if (data.T, data.d) != (state.T, state.d):
        raise ShapeError("state and data dimensions differ")
    X, y, tidx = data.X, data.y, data.task_index
    mean_wz = state.M * state.phi
    ref = mean_wz if reference is None else np.asarray(reference, dtype=float)
    if ref.shape != mean_wz.shape:
        raise ShapeError(f"reference has shape {ref.shape}, expected {mean_wz.shape}")

    mu = np.sum(X * mean_wz[tidx], axis=1)
    s = np.sum(X * ref[tidx], axis=1)
    sig = sigmoid(s)
    out = float(np.sum(y * mu))
    out += float(np.sum(-log1pexp(s) + sig * s - 0.125 * s * s - sig * mu + 0.25 * s * mu - 0.125 * mu * mu))
    diag = np.diagonal(state.Sigmas, axis1=1, axis2=2).T  # (T, d)
    curvature = (state.M**2 * (state.phi - 1.0) - diag) * state.phi * data.sq_sums
    out += 0.125 * float(np.sum(curvature))
    return out


def surrogate_elbo(state: VariationalState, data: MultitaskDataset, hyper: Hyperparameters, reference=None) -> float:
    return elbo_global_terms(state, hyper) + surrogate_data_terms(state, data, reference)


def _linear_predictor(state, data):
    return np.sum(data.X * (state.M * state.phi)[data.task_index], axis=1)


def _task_sums(data, values):
    return np.bincount(data.task_index, weights=values, minlength=data.T)


def _check_j(j, state):
    if not 0 <= j < state.d:
        raise ShapeError(f"feature index {j} out of range for d={state.d}")


def update_sigma_j(j: int, state: VariationalState, data: MultitaskDataset):
    """New covariance of w_(j): inverse of (v V + diag(phi_j * sum_i x^2) / 4)."""
    _check_j(j, state)
    A = state.v * state.V + 0.25 * np.diag(state.phi[j] * data.sq_sums[:, j])
    return linalg.spd_inverse(A)


def update_m_j(j: int, state: VariationalState, data: MultitaskDataset):
    """New mean of w_(j) using the state's current Sigma_j and predictions."""
    _check_j(j, state)
    resid = data.y - sigmoid(_linear_predictor(state, data))
    phi_j = state.phi[j]
    rhs = phi_j * _task_sums(data, resid * data.X[:, j])
    rhs += 0.25 * phi_j**2 * data.sq_sums[:, j] * state.M[:, j]
    return state.Sigmas[j] @ rhs


def _phi_logit(j, state, data, resid):
    m_j = state.M[:, j]
    a = digamma(state.alpha) - digamma(state.beta)
    a += float(m_j @ _task_sums(data, resid * data.X[:, j]))
    diag = np.diagonal(state.Sigmas[j])
    a += 0.125 * float(np.sum((m_j**2 * (2.0 * state.phi[j] - 1.0) - diag) * data.sq_sums[:, j]))
    return a


def update_phi_j(j: int, state: VariationalState, data: MultitaskDataset) -> float:
    """New inclusion probability of feature j."""
    _check_j(j, state)
    resid = data.y - sigmoid(_linear_predictor(state, data))
    return float(sigmoid(_phi_logit(j, state, data, resid)))


def update_beta_params(state: VariationalState, hyper: Hyperparameters):
    s = float(np.sum(state.phi))
    return hyper.alpha0 + s, hyper.beta0 + state.d - s


def update_wishart_params(state: VariationalState, hyper: Hyperparameters):
    second_moment = state.M @ state.M.T + np.sum(state.Sigmas, axis=0)
    V = linalg.spd_inverse(linalg.spd_inverse(hyper.V0) + second_moment)
    return hyper.v0 + state.d, V


def literal_sweep(state: VariationalState, data: MultitaskDataset, hyper: Hyperparameters):
    """One sweep built from the public single-block updates, recomputing all
    predictions before every mean and inclusion update. Slow; used as a
    reference for ``cavi_fit``."""
    Sigmas = np.stack([update_sigma_j(j, state, data) for j in range(state.d)])
    state = state.replace(Sigmas=Sigmas)
    for j in range(state.d):
        M = state.M.copy()
        M[:, j] = update_m_j(j, state, data)
        state = state.replace(M=M)
    for j in range(state.d):
        phi = state.phi.copy()
        phi[j] = update_phi_j(j, state, data)
        state = state.replace(phi=phi)
    alpha, beta = update_beta_params(state, hyper)
    state = state.replace(alpha=alpha, beta=beta)
    v, V = update_wishart_params(state, hyper)
    return state.replace(v=v, V=V)


def _sweep(state, data, hyper, V0_inv, XT, offsets):
    """Fast sweep; the linear predictor is updated incrementally after each
    coordinate change instead of being recomputed from scratch."""
    T, d = state.T, state.d
    S2 = data.sq_sums
    M = np.array(state.M, dtype=float, order="C")
    phi = np.array(state.phi, dtype=float)

    A = np.broadcast_to(state.v * state.V, (d, T, T)).copy()
    diag_idx = np.arange(T)
    A[:, diag_idx, diag_idx] += 0.25 * (phi[:, None] * S2.T)
    Sigmas = np.ascontiguousarray(linalg.batch_spd_inverse(A))

    eta = np.sum(data.X * (M * phi)[data.task_index], axis=1)
    _kernels.mean_pass(XT, data.y, offsets, S2, phi, M, Sigmas, eta)
    psi_diff = digamma(state.alpha) - digamma(state.beta)
    _kernels.inclusion_pass(XT, data.y, offsets, S2, phi, M, Sigmas, eta, psi_diff)

    s = float(np.sum(phi))
    alpha, beta = hyper.alpha0 + s, hyper.beta0 + d - s
    second_moment = M @ M.T + np.sum(Sigmas, axis=0)
    V = linalg.spd_inverse(V0_inv + second_moment)
    return VariationalState(alpha, beta, hyper.v0 + d, V, phi, M, Sigmas)


def cavi_fit(data: MultitaskDataset, hyper: Hyperparameters, config: FitConfig = FitConfig(), init=None) -> FitResult:
    """Run CAVI sweeps until the relative change of the surrogate ELBO drops
    below ``config.elbo_rel_tol`` or ``config.max_sweeps`` is reached."""
    state = init_state(data, hyper, config) if init is None else init
    V0_inv = linalg.spd_inverse(hyper.V0)
    XT = np.ascontiguousarray(data.X.T)
    offsets = np.concatenate([[0], np.cumsum(data.n_per_task)]).astype(np.int64)
    trace = []
    converged = False
    for _ in range(config.max_sweeps):
        state = _sweep(state, data, hyper, V0_inv, XT, offsets)
        elbo = surrogate_elbo(state, data, hyper)
        if not math.isfinite(elbo):
            raise DomainError("surrogate ELBO became non-finite")
        trace.append(elbo)
        if len(trace) > 1 and abs(trace[-1] - trace[-2]) < config.elbo_rel_tol * abs(trace[-2]):
            converged = True
            break
    return FitResult(state=state, elbo_trace=tuple(trace), converged=converged, sweeps_run=len(trace))
