"""Compiled per-pair loops shared by the E-step schedules.

Everything here works on flat arrays; the wrappers in ``inference`` own the
bookkeeping.  Kernels release the GIL so chunks of pairs can run on threads.
"""

import math

import numpy as np
from numba import njit

_JIT = dict(cache=True, nogil=True)


@njit(**_JIT)
def digamma(x):
    result = 0.0
    while x < 10.0:
        result -= 1.0 / x
        x += 1.0
    f = 1.0 / (x * x)
    tail = f * (-1.0 / 12 + f * (1.0 / 120 + f * (-1.0 / 252 + f * (
        1.0 / 240 + f * (-1.0 / 132 + f * (691.0 / 32760 + f * (-1.0 / 12)))))))
    return result + math.log(x) - 0.5 / x + tail


@njit(**_JIT)
def expected_log_pi_row(gamma_row, out):
    total = 0.0
    for k in range(gamma_row.shape[0]):
        total += gamma_row[k]
    dg_total = digamma(total)
    for k in range(gamma_row.shape[0]):
        out[k] = digamma(gamma_row[k]) - dg_total


@njit(**_JIT)
def _softmax_into(logits, out):
    """Normalize exp(logits) into ``out``; returns max-abs change of ``out``."""
    K = logits.shape[0]
    mx = logits[0]
    for k in range(1, K):
        if logits[k] > mx:
            mx = logits[k]
    total = 0.0
    for k in range(K):
        logits[k] = math.exp(logits[k] - mx)
        total += logits[k]
    delta = 0.0
    for k in range(K):
        v = logits[k] / total
        d = abs(v - out[k])
        if d > delta:
            delta = d
        out[k] = v
    return delta


@njit(**_JIT)
def phi_pair(F, elog_p, elog_q, tol, max_inner, phi_out, phi_in, work, warm=False):
    """Fixed-point iteration for one pair's two indicator distributions.

    ``F[g, h]`` is the log Bernoulli likelihood of the observed value under
    block (g, h).  Starts from uniform vectors unless ``warm``, in which case
    the incoming contents of ``phi_out``/``phi_in`` are the starting point.
    Each sweep updates the initiator vector from the receiver vector, then
    the receiver vector from the fresh initiator vector.  Returns the number
    of sweeps used.
    """
    K = elog_p.shape[0]
    if not warm:
        for k in range(K):
            phi_out[k] = 1.0 / K
            phi_in[k] = 1.0 / K
    for it in range(1, max_inner + 1):
        for g in range(K):
            s = elog_p[g]
            for h in range(K):
                s += phi_in[h] * F[g, h]
            work[g] = s
        d_out = _softmax_into(work, phi_out)
        for h in range(K):
            s = elog_q[h]
            for g in range(K):
                s += phi_out[g] * F[g, h]
            work[h] = s
        d_in = _softmax_into(work, phi_in)
        if d_out < tol and d_in < tol:
            return it
    return max_inner


@njit(**_JIT)
def _accumulate(m, r, phi_out, phi_in, s1, s0):
    K = phi_out.shape[0]
    target = s1 if r == 1 else s0
    for g in range(K):
        for h in range(K):
            target[m, g, h] += phi_out[g] * phi_in[h]


@njit(**_JIT)
def _neg_entropy(phi):
    s = 0.0
    for k in range(phi.shape[0]):
        if phi[k] > 0.0:
            s += phi[k] * math.log(phi[k])
    return s


@njit(**_JIT)
def jacobi_pass(P, Q, R, start, stop, elog, F1, F0, tol, max_inner,
                phi_out_store, phi_in_store, iters, warm):
    """Update every pair in [start, stop) of the flattened (m, pair) range
    against a fixed E[log pi] table, storing the results in place."""
    n_pairs = P.shape[0]
    K = elog.shape[1]
    work = np.empty(K)
    for idx in range(start, stop):
        m = idx // n_pairs
        i = idx - m * n_pairs
        F = F1 if R[m, i] == 1 else F0
        iters[m, i] = phi_pair(F, elog[P[i]], elog[Q[i]], tol, max_inner,
                               phi_out_store[m, i], phi_in_store[m, i], work, warm)


@njit(**_JIT)
def _elog_floored(gamma_row, out):
    # working gamma can dip below zero transiently; the floor keeps digamma finite
    K = gamma_row.shape[0]
    tmp = np.empty(K)
    for k in range(K):
        tmp[k] = gamma_row[k] if gamma_row[k] > 1e-10 else 1e-10
    expected_log_pi_row(tmp, out)


@njit(**_JIT)
def nested_pass(P, Q, R, start, stop, gamma_ref, elog_ref, gamma, F1, F0, tol, max_inner,
                out_sum, in_sum, s1, s0, entropy, store, phi_out_store, phi_in_store):
    """Nested sweep over pairs in [start, stop) with in-place gamma updates.

    For pair (p, q), a reference solution is computed against the sweep-start
    ``gamma_ref`` (whose E[log pi] rows are ``elog_ref``) and the working solution against the current ``gamma``
    (warm-started from the reference).  ``gamma[p]`` and ``gamma[q]`` then
    move by the difference, so later pairs see the effect of earlier ones
    and, at a fixed point, ``gamma`` stays equal to ``gamma_ref``.  Block
    statistics, node sums and entropies of the working solutions are
    accumulated; nothing proportional to the pair count is kept unless
    ``store`` is set.  Returns the largest inner sweep count.
    """
    n_pairs = P.shape[0]
    K = gamma.shape[1]
    elog_p = np.empty(K)
    elog_q = np.empty(K)
    ref_out = np.empty(K)
    ref_in = np.empty(K)
    phi_out = np.empty(K)
    phi_in = np.empty(K)
    work = np.empty(K)
    worst = 0
    for idx in range(start, stop):
        m = idx // n_pairs
        i = idx - m * n_pairs
        p = P[i]
        q = Q[i]
        r = R[m, i]
        F = F1 if r == 1 else F0
        it = phi_pair(F, elog_ref[p], elog_ref[q], tol, max_inner, ref_out, ref_in, work)
        for k in range(K):
            phi_out[k] = ref_out[k]
            phi_in[k] = ref_in[k]
        moved = False
        for k in range(K):
            if gamma[p, k] != gamma_ref[p, k] or gamma[q, k] != gamma_ref[q, k]:
                moved = True
                break
        if moved:
            _elog_floored(gamma[p], elog_p)
            _elog_floored(gamma[q], elog_q)
            it2 = phi_pair(F, elog_p, elog_q, tol, max_inner, phi_out, phi_in, work, True)
            if it2 > it:
                it = it2
        if it > worst:
            worst = it
        for k in range(K):
            gamma[p, k] += phi_out[k] - ref_out[k]
            gamma[q, k] += phi_in[k] - ref_in[k]
            out_sum[p, k] += phi_out[k]
            in_sum[q, k] += phi_in[k]
        _accumulate(m, r, phi_out, phi_in, s1, s0)
        entropy[0] -= _neg_entropy(phi_out)
        entropy[1] -= _neg_entropy(phi_in)
        if store:
            for k in range(K):
                phi_out_store[m, i, k] = phi_out[k]
                phi_in_store[m, i, k] = phi_in[k]
    return worst
