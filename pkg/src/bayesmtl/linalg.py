"""Cholesky-based helpers for small symmetric positive-definite matrices."""

import numpy as np

from .errors import DomainError

_JITTER_START = 1e-10
_JITTER_STOP = 1e-6


def cholesky(A):
    """Lower Cholesky factor of ``A`` with escalating diagonal jitter.

    Jitter starts at 1e-10 * trace/T and grows by 10x up to 1e-6 * trace/T.
    Raises DomainError if ``A`` is still not factorizable.
    """
    A = np.asarray(A, dtype=float)
    if A.ndim != 2 or A.shape[0] != A.shape[1]:
        raise DomainError(f"expected a square matrix, got shape {A.shape}")
    if not np.all(np.isfinite(A)):
        raise DomainError("matrix has non-finite entries")
    try:
        return np.linalg.cholesky(A)
    except np.linalg.LinAlgError:
        pass
    T = A.shape[0]
    scale = abs(np.trace(A)) / T
    if scale == 0.0:
        scale = 1.0
    eye = np.eye(T)
    rel = _JITTER_START
    while rel <= _JITTER_STOP * (1 + 1e-9):
        try:
            return np.linalg.cholesky(A + rel * scale * eye)
        except np.linalg.LinAlgError:
            rel *= 10.0
    raise DomainError("matrix is not positive definite (Cholesky failed after jitter)")


def logdet(A):
    L = cholesky(A)
    return 2.0 * float(np.sum(np.log(np.diag(L))))


def spd_inverse(A):
    """Inverse of an SPD matrix, symmetrized."""
    L = cholesky(A)
    Linv = np.linalg.solve(L, np.eye(L.shape[0]))
    inv = Linv.T @ Linv
    return 0.5 * (inv + inv.T)


def batch_spd_inverse(A):
    """Inverse of a stack of SPD matrices with shape (k, T, T)."""
    A = np.asarray(A, dtype=float)
    try:
        L = np.linalg.cholesky(A)
    except np.linalg.LinAlgError:
        return np.stack([spd_inverse(a) for a in A])
    eye = np.broadcast_to(np.eye(A.shape[-1]), A.shape)
    Linv = np.linalg.solve(L, eye)
    inv = np.swapaxes(Linv, -1, -2) @ Linv
    return 0.5 * (inv + np.swapaxes(inv, -1, -2))


def batch_logdet(A):
    """Log-determinants of a stack of SPD matrices with shape (k, T, T)."""
    A = np.asarray(A, dtype=float)
    try:
        L = np.linalg.cholesky(A)
    except np.linalg.LinAlgError:
        return np.array([logdet(a) for a in A])
    return 2.0 * np.sum(np.log(np.diagonal(L, axis1=-2, axis2=-1)), axis=-1)
