"""Compiled inner loops of the CAVI sweep.

Rows are stacked task by task; ``offsets[t]:offsets[t + 1]`` are the rows of
task t and ``XT`` is the transposed design (d, N). ``eta`` holds the linear
predictor <m_t * phi, x> and is kept current in place.
"""

import math

import numba
import numpy as np


@numba.njit(cache=True, inline="always")
def _sig(x):
    return 0.5 * (1.0 + math.tanh(0.5 * x))


@numba.njit(cache=True)
def mean_pass(XT, y, offsets, S2, phi, M, Sigmas, eta):
    d, T = M.shape[1], M.shape[0]
    rhs = np.empty(T)
    m_new = np.empty(T)
    for j in range(d):
        pj = phi[j]
        for t in range(T):
            acc = 0.0
            for i in range(offsets[t], offsets[t + 1]):
                acc += (y[i] - _sig(eta[i])) * XT[j, i]
            rhs[t] = pj * acc + 0.25 * pj * pj * S2[t, j] * M[t, j]
        for a in range(T):
            acc = 0.0
            for b in range(T):
                acc += Sigmas[j, a, b] * rhs[b]
            m_new[a] = acc
        for t in range(T):
            delta = pj * (m_new[t] - M[t, j])
            if delta != 0.0:
                for i in range(offsets[t], offsets[t + 1]):
                    eta[i] += XT[j, i] * delta
            M[t, j] = m_new[t]


@numba.njit(cache=True)
def inclusion_pass(XT, y, offsets, S2, phi, M, Sigmas, eta, psi_diff):
    d, T = M.shape[1], M.shape[0]
    for j in range(d):
        a = psi_diff
        for t in range(T):
            acc = 0.0
            for i in range(offsets[t], offsets[t + 1]):
                acc += (y[i] - _sig(eta[i])) * XT[j, i]
            m = M[t, j]
            a += m * acc + 0.125 * (m * m * (2.0 * phi[j] - 1.0) - Sigmas[j, t, t]) * S2[t, j]
        phi_new = _sig(a)
        delta = phi_new - phi[j]
        if delta != 0.0:
            for t in range(T):
                step = M[t, j] * delta
                for i in range(offsets[t], offsets[t + 1]):
                    eta[i] += XT[j, i] * step
        phi[j] = phi_new
