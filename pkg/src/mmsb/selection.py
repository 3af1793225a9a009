"""Choosing the number of groups: BIC for small networks, held-out
likelihood under pair cross-validation for large ones."""

from __future__ import annotations

import csv
import json
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .estimation import FitConfig, FitError, FitResult, fit
from .evaluation import edge_probabilities
from .netdata import Network, NetworkSet, PairMask, as_network_set, pair_data, split_folds

logger = logging.getLogger(__name__)

BIC = "bic"
CV = "cv"
CRITERIA = (BIC, CV)


def n_free_params(k: int, config: FitConfig | None = None) -> int:
    """Number of estimated hyperparameters.

    The full model counts K for alpha, K^2 for B and one for rho when rho is
    estimated.  A symmetric alpha counts once; fixed blocks count zero.
    """
    if config is None:
        return k + k * k
    n = {"estimate_vector": k, "estimate_scalar_symmetric": 1, "fixed": 0}[config.alpha_mode]
    n += k * k if config.b_mode == "estimate" else 0
    n += 1 if config.rho_mode == "estimate" else 0
    return n


def _log_bernoulli(prob: np.ndarray, r: np.ndarray) -> np.ndarray:
    with np.errstate(divide="ignore"):
        return np.log(np.where(r == 1, prob, 1.0 - prob))


def plugin_loglik(fit: FitResult, data: Network | NetworkSet,
                  exclude: PairMask | None = None) -> float:
    """log p(R | pi_hat, B_hat, rho_hat) over the training pairs of every replicate."""
    pairs = pair_data(data, exclude)
    probs = edge_probabilities(fit.pi_hat, fit.hyper_hat, fit.diagonal_policy)
    return float(_log_bernoulli(probs[pairs.p, pairs.q][None, :], pairs.r).sum())


def bic_score(fit: FitResult, data: Network | NetworkSet, exclude: PairMask | None = None) -> float:
    """2 log p(R | pi_hat, B_hat) - (free parameters) log |R|.

    ``|R|`` is the number of positive relations observed, summed over
    replicates.
    """
    data = as_network_set(data)
    n_pos = int(pair_data(data, exclude).r.sum())
    if n_pos == 0:
        raise ValueError("BIC needs at least one positive relation")
    k = fit.hyper_hat.k_groups
    return 2.0 * plugin_loglik(fit, data, exclude) - n_free_params(k, fit.config) * np.log(n_pos)


def heldout_loglik(fit: FitResult, data: Network | NetworkSet, mask: PairMask) -> float:
    """Sum over held-out pairs and replicates of log p_hat^R (1 - p_hat)^(1 - R).

    A confident wrong prediction gives ``-inf``.
    """
    data = as_network_set(data)
    if len(mask) == 0:
        return 0.0
    probs = edge_probabilities(fit.pi_hat, fit.hyper_hat, fit.diagonal_policy)
    p, q = mask.held_out[:, 0], mask.held_out[:, 1]
    r = data.stacked()[:, p, q]
    return float(_log_bernoulli(probs[p, q][None, :], r).sum())


@dataclass
class Candidate:
    k: int
    score: float
    fold_scores: list
    fit_summary: list
    failed: str | None = None

    def to_dict(self) -> dict:
        return {"K": self.k, "score": _json_float(self.score),
                "fold_scores": [_json_float(s) for s in self.fold_scores],
                "fit_summary": self.fit_summary, "failed": self.failed}


def _json_float(x):
    # JSON has no infinities; keep them readable as strings
    x = float(x)
    return x if np.isfinite(x) else str(x)


@dataclass
class SelectionReport:
    candidates: list
    chosen_k: int | None
    criterion: str
    n_folds: int = 0
    seed: int = 0
    notes: list = field(default_factory=list)

    def curve(self) -> list[tuple[int, float, float]]:
        """(K, mean score, standard deviation over folds) per successful candidate."""
        rows = []
        for c in self.candidates:
            if c.failed is None:
                rows.append((c.k, c.score, float(np.std(c.fold_scores)) if c.fold_scores else 0.0))
        return rows

    def to_dict(self) -> dict:
        return {"criterion": self.criterion, "chosen_k": self.chosen_k,
                "n_folds": self.n_folds, "seed": self.seed,
                "candidates": [c.to_dict() for c in self.candidates], "notes": self.notes}

    def save_json(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2))

    def save_csv(self, path: str | Path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["K", "mean_score", "std_score"])
            for k, mean, std in self.curve():
                w.writerow([k, repr(mean), repr(std)])


def _summary(result: FitResult) -> dict:
    return {"converged": result.converged, "iterations": result.iterations,
            "final_elbo": result.final_elbo}


def choose(candidates: list[Candidate]) -> int | None:
    """Highest score among successful candidates; the smallest K wins ties."""
    best = None
    for c in sorted(candidates, key=lambda c: c.k):
        if c.failed is None and not np.isnan(c.score) and (best is None or c.score > best.score):
            best = c
    return None if best is None else best.k


_FIT_FAILURES = (FitError, FloatingPointError, np.linalg.LinAlgError, ValueError)


def select_k(data: Network | NetworkSet, k_range, criterion: str = CV, n_folds: int = 5,
             seed: int = 0, config: FitConfig | None = None, jobs: int = 1) -> SelectionReport:
    """Fit every K in ``k_range`` and pick the best by ``criterion``.

    ``cv`` splits the valid pairs of the first replicate into ``n_folds``
    stratified folds; each fold is held out of one fit and scored by
    :func:`heldout_loglik`, and a candidate's score is the mean over folds.
    ``bic`` fits once on all pairs and uses :func:`bic_score`.  ``config``
    is a template whose ``k_groups`` is overridden.  A candidate whose fit
    raises is recorded as failed and cannot be chosen.  ``jobs`` runs the
    independent fits on that many threads; results do not depend on it.
    """
    if criterion not in CRITERIA:
        raise ValueError(f"criterion must be one of {CRITERIA}")
    ks = sorted({int(k) for k in k_range})
    if not ks:
        raise ValueError("k_range is empty")
    if ks[0] < 1:
        raise ValueError("K must be positive")
    data = as_network_set(data)
    template = config if config is not None else FitConfig(k_groups=ks[0], seed=seed)
    masks = split_folds(data.replicates[0], n_folds, seed) if criterion == CV else [None]

    def job(item):
        k, mask = item
        cfg = replace(template, k_groups=k)
        try:
            result = fit(data, cfg, exclude=mask)
            score = bic_score(result, data) if mask is None else heldout_loglik(result, data, mask)
            return score, _summary(result), None
        except _FIT_FAILURES as exc:
            logger.warning("fit with K=%d failed: %s", k, exc)
            return float("nan"), None, f"{type(exc).__name__}: {exc}"

    items = [(k, m) for k in ks for m in masks]
    if jobs > 1:
        with ThreadPoolExecutor(max_workers=jobs) as pool:
            outcomes = list(pool.map(job, items))
    else:
        outcomes = [job(it) for it in items]

    candidates = []
    for i, k in enumerate(ks):
        chunk = outcomes[i * len(masks):(i + 1) * len(masks)]
        errors = [err for _, _, err in chunk if err is not None]
        scores = [s for s, _, _ in chunk]
        summaries = [s for _, s, _ in chunk]
        if errors:
            candidates.append(Candidate(k, float("nan"), scores, summaries, "; ".join(errors)))
        else:
            candidates.append(Candidate(k, float(np.mean(scores)), scores, summaries))
    report = SelectionReport(candidates, choose(candidates), criterion,
                             n_folds if criterion == CV else 0, seed)
    if report.chosen_k is None:
        report.notes.append("every candidate failed")
    return report
