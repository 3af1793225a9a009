"""Independent transcriptions of the update equations, written as plain loops.

Nothing here imports the package's numerical code; mpmath supplies the
special functions so that these can serve as oracles for the vectorized and
compiled implementations.
"""

import math

import mpmath
import numpy as np


def digamma(x):
    return float(mpmath.digamma(x))


def trigamma(x):
    return float(mpmath.polygamma(1, x))


def elog_pi(gamma_row):
    total = digamma(sum(gamma_row))
    return [digamma(g) - total for g in gamma_row]


def bern_loglik(r, rate):
    return math.log(rate) if r == 1 else math.log(1.0 - rate)


def phi_fixed_point(r, gamma_p, gamma_q, B, rho, tol=1e-12, max_inner=10_000):
    """Iterate the two multiplicative updates from uniform, initiator first."""
    K = len(gamma_p)
    eq_p, eq_q = elog_pi(gamma_p), elog_pi(gamma_q)
    rate = [[(1.0 - rho) * B[g][h] for h in range(K)] for g in range(K)]
    out = [1.0 / K] * K
    inc = [1.0 / K] * K
    for _ in range(max_inner):
        new_out = []
        for g in range(K):
            v = math.exp(eq_p[g])
            for h in range(K):
                v *= math.exp(bern_loglik(r, rate[g][h])) ** inc[h]
            new_out.append(v)
        z = sum(new_out)
        new_out = [v / z for v in new_out]
        new_in = []
        for h in range(K):
            v = math.exp(eq_q[h])
            for g in range(K):
                v *= math.exp(bern_loglik(r, rate[g][h])) ** new_out[g]
            new_in.append(v)
        z = sum(new_in)
        new_in = [v / z for v in new_in]
        delta = max(max(abs(a - b) for a, b in zip(new_out, out)),
                    max(abs(a - b) for a, b in zip(new_in, inc)))
        out, inc = new_out, new_in
        if delta < tol:
            break
    return np.array(out), np.array(inc)


def gamma_direct(alpha, pairs, phi_out, phi_in, node):
    """alpha_k + sum over replicates and pairs of the node's slot masses."""
    K = len(alpha)
    g = [float(a) for a in alpha]
    M = len(phi_out)
    for m in range(M):
        for i, (p, q) in enumerate(pairs):
            for k in range(K):
                if p == node:
                    g[k] += phi_out[m][i][k]
                if q == node:
                    g[k] += phi_in[m][i][k]
    return np.array(g)


def block_direct(pairs, R, phi_out, phi_in):
    """Per-replicate mass-weighted edge fraction, averaged over replicates with mass."""
    M, K = len(R), len(phi_out[0][0])
    B = np.zeros((K, K))
    for g in range(K):
        for h in range(K):
            ratios = []
            for m in range(M):
                num = den = 0.0
                for i in range(len(pairs)):
                    w = phi_out[m][i][g] * phi_in[m][i][h]
                    num += R[m][i] * w
                    den += w
                if den > 0:
                    ratios.append(num / den)
            B[g, h] = sum(ratios) / len(ratios) if ratios else 0.5
    return B


def rho_direct(pairs, R, phi_out, phi_in):
    M, K = len(R), len(phi_out[0][0])
    per_rep = []
    for m in range(M):
        num = den = 0.0
        for i in range(len(pairs)):
            for g in range(K):
                for h in range(K):
                    w = phi_out[m][i][g] * phi_in[m][i][h]
                    num += (1 - R[m][i]) * w
                    den += w
        per_rep.append(num / den)
    return sum(per_rep) / M


def elbo_direct(gamma, pairs, R, phi_out, phi_in, alpha, B, rho):
    """Every line of the bound, summed term by term."""
    N, K = len(gamma), len(alpha)
    elog = [elog_pi(gamma[p]) for p in range(N)]
    total = 0.0
    for m in range(len(R)):
        for i, (p, q) in enumerate(pairs):
            fo, fi = phi_out[m][i], phi_in[m][i]
            for g in range(K):
                for h in range(K):
                    rate = (1.0 - rho) * B[g][h]
                    total += fo[g] * fi[h] * bern_loglik(R[m][i], rate)
            for g in range(K):
                total += fo[g] * elog[p][g] + fi[g] * elog[q][g]
                if fo[g] > 0:
                    total -= fo[g] * math.log(fo[g])
                if fi[g] > 0:
                    total -= fi[g] * math.log(fi[g])
    sa = sum(alpha)
    for p in range(N):
        total += math.lgamma(sa) - sum(math.lgamma(a) for a in alpha)
        total += sum((alpha[k] - 1.0) * elog[p][k] for k in range(K))
        sg = sum(gamma[p])
        total -= math.lgamma(sg) - sum(math.lgamma(gamma[p][k]) for k in range(K))
        total -= sum((gamma[p][k] - 1.0) * elog[p][k] for k in range(K))
    return total
