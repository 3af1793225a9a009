"""Posterior edge prediction, precision-recall, membership alignment and the
exact marginal likelihood used to certify the variational bound."""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass
from pathlib import Path
from typing import NamedTuple

import numpy as np
from scipy.optimize import linear_sum_assignment
from scipy.special import gammaln, logsumexp, xlogy
from sklearn.metrics import adjusted_rand_score

from .genmodel import Hyperparams
from .netdata import EXCLUDED, Network, NetworkSet, as_network_set, valid_pairs

PI_BASED = "pi_based"
PHI_BASED = "phi_based"
ORACLE_LIMIT = 2 ** 24


# -- prediction ----------------------------------------------------------------------


@dataclass(frozen=True)
class PredictionMatrix:
    probs: np.ndarray
    mode: str

    def save_csv(self, path: str | Path) -> None:
        np.savetxt(path, self.probs, delimiter=",", fmt="%.17g")


def _check_rows(pi: np.ndarray, atol: float = 1e-8) -> np.ndarray:
    pi = np.asarray(pi, dtype=float)
    if pi.ndim != 2:
        raise ValueError("membership matrix must be two-dimensional")
    if np.any(pi < -atol) or np.any(np.abs(pi.sum(axis=1) - 1.0) > atol):
        bad = int(np.flatnonzero((np.abs(pi.sum(axis=1) - 1.0) > atol) | (pi < -atol).any(axis=1))[0])
        raise ValueError(f"membership row {bad} is not on the simplex")
    return pi


def edge_probabilities(pi: np.ndarray, hyper: Hyperparams,
                       diagonal_policy: str = EXCLUDED) -> np.ndarray:
    """(1 - rho) pi_p' B pi_q for every ordered pair; rows must lie on the simplex."""
    pi = _check_rows(pi)
    probs = np.clip(pi @ hyper.effective_block @ pi.T, 0.0, 1.0)
    if diagonal_policy == EXCLUDED:
        np.fill_diagonal(probs, 0.0)
    return probs


def predict_matrix(fit, mode: str = PI_BASED) -> PredictionMatrix:
    """Posterior edge probabilities from a fit.

    ``pi_based`` plugs the estimated memberships into the bilinear form.
    ``phi_based`` uses each pair's own indicator distributions, averaged over
    replicates; it needs a fit that kept them (``retain_phi`` or the naive
    schedule).  Pairs the fit never saw, such as held-out pairs, fall back to
    the membership-based value.
    """
    if mode not in (PI_BASED, PHI_BASED):
        raise ValueError(f"mode must be {PI_BASED!r} or {PHI_BASED!r}")
    hyper = fit.hyper_hat
    probs = edge_probabilities(fit.pi_hat, hyper, fit.diagonal_policy)
    if mode == PHI_BASED:
        state = fit.state
        if not state.has_phi or fit.phi_pairs is None:
            raise ValueError("phi_based prediction needs the per-pair indicator "
                             "distributions; refit with retain_phi")
        per_pair = np.einsum("mpg,gh,mph->p", state.phi_out, hyper.effective_block,
                             state.phi_in) / state.phi_out.shape[0]
        probs[fit.phi_pairs[:, 0], fit.phi_pairs[:, 1]] = np.clip(per_pair, 0.0, 1.0)
    return PredictionMatrix(probs, mode)


# -- precision-recall ----------------------------------------------------------------


@dataclass(frozen=True)
class PRCurve:
    """Points sorted by increasing threshold, with the trapezoid area."""

    thresholds: np.ndarray
    precision: np.ndarray
    recall: np.ndarray
    area: float

    @property
    def points(self) -> list[tuple[float, float, float]]:
        return list(zip(self.thresholds.tolist(), self.precision.tolist(), self.recall.tolist()))

    def save_csv(self, path: str | Path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["threshold", "precision", "recall"])
            for t, p, r in self.points:
                w.writerow([repr(t), repr(p), repr(r)])


def _pr_area(precision: np.ndarray, recall: np.ndarray) -> float:
    # walk from the strictest threshold, anchored at recall 0 with its precision
    order = np.arange(len(recall))[::-1]
    r = np.concatenate([[0.0], recall[order]])
    p = np.concatenate([[precision[order[0]]], precision[order]])
    return float(np.sum(np.diff(r) * (p[1:] + p[:-1]) / 2.0))


def precision_recall(pred: PredictionMatrix | np.ndarray, reference: Network,
                     thresholds=None, pairs: np.ndarray | None = None) -> PRCurve:
    """Precision and recall of ``prob >= t`` against a binary reference.

    Scores valid pairs of ``reference`` (or only ``pairs``, an (H, 2) array).
    Thresholds default to the distinct predicted values plus 0, which traces
    the exact curve.  An empty predicted set has precision 1.
    """
    probs = pred.probs if isinstance(pred, PredictionMatrix) else np.asarray(pred, dtype=float)
    n = reference.n_nodes
    if probs.shape != (n, n):
        raise ValueError(f"prediction is {probs.shape}, reference has {n} nodes")
    if pairs is None:
        p, q = valid_pairs(n, reference.diagonal_policy)
    else:
        pairs = np.asarray(pairs, dtype=np.int64).reshape(-1, 2)
        p, q = pairs[:, 0], pairs[:, 1]
    scores = probs[p, q]
    truth = reference.adjacency[p, q].astype(bool)
    n_pos = int(truth.sum())
    if n_pos == 0:
        raise ValueError("reference has no edges among the scored pairs")
    if thresholds is None:
        thresholds = np.union1d(np.unique(scores), [0.0])
    thresholds = np.sort(np.asarray(thresholds, dtype=float))

    order = np.argsort(scores, kind="stable")
    sorted_scores = scores[order]
    # positives at or above each sorted position
    tp_tail = np.concatenate([np.cumsum(truth[order][::-1])[::-1], [0]])
    start = np.searchsorted(sorted_scores, thresholds, side="left")
    tp = tp_tail[start]
    predicted = len(scores) - start
    with np.errstate(invalid="ignore", divide="ignore"):
        precision = np.where(predicted > 0, tp / np.maximum(predicted, 1), 1.0)
    recall = tp / n_pos
    return PRCurve(thresholds, precision.astype(float), recall.astype(float),
                   _pr_area(precision, recall))


# -- membership alignment ------------------------------------------------------------


class Alignment(NamedTuple):
    permutation: np.ndarray
    ari: float
    accuracy: float

    def to_dict(self) -> dict:
        return {"permutation": self.permutation.tolist(), "ari": self.ari,
                "accuracy": self.accuracy}

    def save(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2))


def align_memberships(est: np.ndarray, truth: np.ndarray) -> Alignment:
    """Match estimated groups to true groups by their hard labels.

    ``permutation[g]`` is the true group matched to estimated group g; the
    matching maximizes the number of agreeing nodes.  ARI does not depend on
    the matching.
    """
    est = np.asarray(est, dtype=float)
    truth = np.asarray(truth, dtype=float)
    if est.ndim != 2 or truth.ndim != 2:
        raise ValueError("memberships must be N x K matrices")
    if est.shape[1] != truth.shape[1]:
        raise ValueError(f"group counts differ: {est.shape[1]} vs {truth.shape[1]}")
    if est.shape[0] != truth.shape[0]:
        raise ValueError(f"node counts differ: {est.shape[0]} vs {truth.shape[0]}")
    k = est.shape[1]
    a, b = est.argmax(axis=1), truth.argmax(axis=1)
    agree = np.zeros((k, k), dtype=np.int64)
    np.add.at(agree, (a, b), 1)
    rows, cols = linear_sum_assignment(agree, maximize=True)
    perm = np.empty(k, dtype=np.int64)
    perm[rows] = cols
    return Alignment(perm, float(adjusted_rand_score(b, a)),
                     float(agree[rows, cols].sum() / len(a)))


# -- exact marginal likelihood -------------------------------------------------------


class OracleTooLarge(ValueError):
    """The assignment space exceeds the enumeration guard."""


class BruteForceOracle:
    """Exact log p(R | alpha, B, rho) for tiny networks.

    The sum runs over every joint assignment of the initiator and receiver
    indicators, with each node's membership integrated out analytically
    (Dirichlet-multinomial).  An assignment enters the summand only through
    its block usage counts on edges and non-edges and its per-node group
    counts, and those counts are additive over pairs.  The constructor
    therefore enumerates pair by pair and merges assignments that agree on
    every count, keeping a multiplicity, which visits all K^S assignments
    exactly while storing only the distinct count vectors.  The result is
    reusable for any hyperparameters with the same K.
    """

    def __init__(self, data: Network | NetworkSet, k_groups: int, limit: int = ORACLE_LIMIT):
        data = as_network_set(data)
        n, m, k = data.n_nodes, data.n_replicates, int(k_groups)
        p, q = valid_pairs(n, data.diagonal_policy)
        n_slots = 2 * m * len(p)
        if k ** n_slots > limit:
            raise OracleTooLarge(f"{k}^{n_slots} assignments exceed the limit {limit}")
        r = data.stacked()[:, p, q]
        self.k_groups, self.n_nodes = k, n
        self.node_slots = (np.bincount(p, minlength=n) + np.bincount(q, minlength=n)) * m

        # count layout: [edge block counts K*K | non-edge block counts K*K | node counts N*K]
        n_edges, n_zero = int(r.sum()), int(r.size - r.sum())
        caps = np.concatenate([np.full(k * k, n_edges), np.full(k * k, n_zero),
                               np.repeat(self.node_slots, k)]) + 1
        if np.sum(np.log2(caps)) > 62:
            raise OracleTooLarge("count encoding does not fit in 64 bits")
        radix = np.concatenate([[1], np.cumprod(caps[:-1])]).astype(np.int64)
        self._caps, self._radix = caps, radix

        g, h = np.divmod(np.arange(k * k), k)
        keys = np.zeros(1, dtype=np.int64)
        mult = np.ones(1, dtype=np.float64)
        for mm in range(m):
            for i in range(len(p)):
                block_base = 0 if r[mm, i] else k * k
                step = (radix[block_base + g * k + h]
                        + radix[2 * k * k + p[i] * k + g]
                        + radix[2 * k * k + q[i] * k + h])
                keys, inverse = np.unique((keys[:, None] + step[None, :]).ravel(),
                                          return_inverse=True)
                mult = np.bincount(inverse, weights=np.repeat(mult, len(step)))
        counts = (keys[:, None] // radix[None, :]) % caps[None, :]
        self.edge_counts = counts[:, :k * k]
        self.zero_counts = counts[:, k * k:2 * k * k]
        self.node_counts = counts[:, 2 * k * k:].reshape(-1, n, k)
        self.log_mult = np.log(mult)
        self.n_assignments = k ** n_slots

    def loglik(self, hyper: Hyperparams) -> float:
        if hyper.k_groups != self.k_groups:
            raise ValueError("hyperparameters have a different number of groups")
        rate = hyper.effective_block.ravel()
        lik = (xlogy(self.edge_counts, rate).sum(axis=1)
               + xlogy(self.zero_counts, 1.0 - rate).sum(axis=1))
        a = hyper.alpha
        dirmult = (gammaln(a.sum()) - gammaln(a.sum() + self.node_slots)).sum()
        dirmult = dirmult + (gammaln(a + self.node_counts) - gammaln(a)).sum(axis=(1, 2))
        return float(logsumexp(self.log_mult + lik + dirmult))


def exact_loglik_bruteforce(data: Network | NetworkSet, hyper: Hyperparams,
                            limit: int = ORACLE_LIMIT) -> float:
    """Exact log marginal likelihood; raises :class:`OracleTooLarge` past the guard."""
    return BruteForceOracle(data, hyper.k_groups, limit).loglik(hyper)
