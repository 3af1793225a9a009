"""M-step updates and the variational EM driver."""

from __future__ import annotations

import json
import logging
import time
import warnings
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from scipy.special import gammaln, polygamma, psi
from sklearn.cluster import KMeans

from . import inference
from .genmodel import Hyperparams
from .inference import SuffStats, VariationalState
from .netdata import Network, NetworkSet, PairData, PairMask, as_network_set, density, pair_data

logger = logging.getLogger(__name__)

B_CLAMP = 1e-9
DEGENERATE_RATE = 0.5

RHO_MODES = ("estimate", "fixed_from_density", "fixed_value")
ALPHA_MODES = ("estimate_vector", "estimate_scalar_symmetric", "fixed")
B_MODES = ("estimate", "fixed")
SCHEDULES = ("nested", "naive")
INITS = ("spectral", "uniform")


class DegenerateBlockWarning(UserWarning):
    """A block pair received no indicator mass; its rate was defaulted."""


class FitError(RuntimeError):
    """The bound became non-finite during fitting."""


# -- alpha ---------------------------------------------------------------------------


def _elog_sum(gamma: np.ndarray) -> np.ndarray:
    return inference.expected_log_pi(gamma).sum(axis=0)


def alpha_objective(alpha, gamma) -> float:
    """The alpha-dependent part of the bound, summed over nodes."""
    alpha = np.asarray(alpha, dtype=float)
    n = gamma.shape[0]
    return float(n * (gammaln(alpha.sum()) - gammaln(alpha).sum())
                 + np.dot(alpha - 1.0, _elog_sum(gamma)))


def alpha_gradient_hessian(alpha, gamma) -> tuple[np.ndarray, np.ndarray, float]:
    """Gradient and Hessian of :func:`alpha_objective`.

    The Hessian is ``diag(hessian_diag) + hessian_offdiag_constant * 11'``
    with ``hessian_diag = -N trigamma(alpha)`` and constant
    ``N trigamma(sum alpha)``, which is what makes an O(K) Newton step
    possible.
    """
    alpha = np.asarray(alpha, dtype=float)
    if np.any(~(alpha > 0)):
        raise ValueError("alpha must be positive")
    gamma = np.asarray(gamma, dtype=float)
    n = gamma.shape[0]
    grad = n * (psi(alpha.sum()) - psi(alpha)) + _elog_sum(gamma)
    return grad, -n * polygamma(1, alpha), float(n * polygamma(1, alpha.sum()))


def _newton_direction(grad, h, c):
    # (diag(h) + c 11')^{-1} grad by Sherman-Morrison
    b = np.sum(grad / h) / (1.0 / c + np.sum(1.0 / h))
    return (grad - b) / h


def mstep_alpha(alpha0, gamma, max_nr: int = 100, nr_tol: float = 1e-8,
                history: list | None = None) -> np.ndarray:
    """Newton-Raphson for the Dirichlet concentration with step halving.

    A step is halved until every component stays positive and the objective
    does not decrease, so the returned value is never worse than ``alpha0``.
    When ``history`` is given, the objective at the start and after every
    accepted step is appended to it.
    """
    alpha = np.asarray(alpha0, dtype=float).copy()
    gamma = np.asarray(gamma, dtype=float)
    value = alpha_objective(alpha, gamma)
    if not np.isfinite(value):
        raise FitError("alpha objective is not finite at the starting point")
    if history is not None:
        history.append(value)
    for _ in range(max_nr):
        grad, h, c = alpha_gradient_hessian(alpha, gamma)
        if np.max(np.abs(grad)) < nr_tol:
            break
        step = _newton_direction(grad, h, c)
        t = 1.0
        while t > 1e-12:
            cand = alpha - t * step
            if np.all(cand > 0):
                cand_value = alpha_objective(cand, gamma)
                if cand_value >= value:
                    break
            t *= 0.5
        else:
            break
        alpha, value = cand, cand_value
        if history is not None:
            history.append(value)
    return alpha


def mstep_alpha_scalar(a0: float, gamma, max_nr: int = 100, nr_tol: float = 1e-8) -> float:
    """Newton-Raphson for a symmetric concentration alpha = a * 1."""
    gamma = np.asarray(gamma, dtype=float)
    n, K = gamma.shape
    s = _elog_sum(gamma).sum()

    def objective(a):
        return n * (gammaln(K * a) - K * gammaln(a)) + (a - 1.0) * s

    a = float(a0)
    value = objective(a)
    for _ in range(max_nr):
        grad = n * K * (psi(K * a) - psi(a)) + s
        if abs(grad) < nr_tol:
            break
        hess = n * (K * K * polygamma(1, K * a) - K * polygamma(1, a))
        step = grad / hess
        t = 1.0
        while t > 1e-12:
            cand = a - t * step
            if cand > 0 and objective(cand) >= value:
                break
            t *= 0.5
        else:
            break
        a, value = cand, objective(cand)
    return a


# -- B and rho -----------------------------------------------------------------------


def _stats_of(state: VariationalState, data) -> SuffStats:
    if state.has_phi:
        pairs = data if isinstance(data, PairData) else pair_data(data)
        return inference.stats_from_phi(pairs, state.phi_out, state.phi_in)
    if state.stats is None:
        raise ValueError("state carries neither indicator distributions nor statistics")
    return state.stats


def block_ratio(stats: SuffStats) -> tuple[np.ndarray, np.ndarray]:
    """Per-replicate edge fraction of each block's mass, averaged over replicates.

    Returns the ratio and a mask of block pairs that received no mass in any
    replicate (their ratio is set to 0.5).
    """
    num = stats.s1
    den = stats.s1 + stats.s0
    defined = den > 0
    with np.errstate(divide="ignore", invalid="ignore"):
        per_rep = np.where(defined, num / den, 0.0)
    count = defined.sum(axis=0)
    degenerate = count == 0
    ratio = np.where(degenerate, DEGENERATE_RATE, per_rep.sum(axis=0) / np.maximum(count, 1))
    return np.clip(ratio, 0.0, 1.0), degenerate


def mstep_B(state: VariationalState, data) -> np.ndarray:
    """Block rate estimate: mass-weighted edge fraction per block pair.

    Block pairs with no mass get 0.5 and a :class:`DegenerateBlockWarning`.
    """
    ratio, degenerate = block_ratio(_stats_of(state, data))
    if degenerate.any():
        cells = [tuple(int(i) for i in c) for c in np.argwhere(degenerate)]
        warnings.warn(f"no mass on block pairs {cells}; rate set to {DEGENERATE_RATE}",
                      DegenerateBlockWarning, stacklevel=2)
    return ratio


def rho_from_stats(stats: SuffStats) -> float:
    per_rep_nonedge = stats.s0.sum(axis=(1, 2))
    per_rep_total = (stats.s0 + stats.s1).sum(axis=(1, 2))
    return float(np.mean(per_rep_nonedge / per_rep_total))


def mstep_rho(state: VariationalState, data) -> float:
    """Mass-weighted fraction of non-interactions, averaged over replicates."""
    return rho_from_stats(_stats_of(state, data))


def fixed_rho(data: Network | NetworkSet) -> float:
    """1 - density of the observed relation(s)."""
    return 1.0 - density(data)


# -- EM driver -----------------------------------------------------------------------


@dataclass
class FitConfig:
    """Options for :func:`fit`.

    ``rho_value``, ``alpha_value`` and ``b_value`` are the fixed values for
    the corresponding ``fixed`` modes; ``alpha_value`` is otherwise the
    Newton starting point (default 1/K).
    """

    k_groups: int
    max_em_iters: int = 500
    em_tol: float = 1e-5
    estep_tol: float = 1e-5
    max_estep_sweeps: int = 200
    inner_tol: float = inference.INNER_TOL
    max_inner: int = inference.MAX_INNER
    rho_mode: str = "fixed_value"
    rho_value: float = 0.0
    alpha_mode: str = "estimate_vector"
    alpha_value: list | float | None = None
    b_mode: str = "estimate"
    b_value: list | None = None
    schedule: str = "nested"
    seed: int = 0
    init: str = "spectral"
    init_strength: float = 0.5
    init_jitter: bool = True
    jitter: float = 0.05
    n_init: int = 1
    threads: int = 1
    retain_phi: bool = False

    def __post_init__(self):
        if self.k_groups < 1:
            raise ValueError("k_groups must be at least 1")
        for name in ("em_tol", "estep_tol", "inner_tol"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be positive")
        for name, value, allowed in (("rho_mode", self.rho_mode, RHO_MODES),
                                     ("alpha_mode", self.alpha_mode, ALPHA_MODES),
                                     ("b_mode", self.b_mode, B_MODES),
                                     ("schedule", self.schedule, SCHEDULES),
                                     ("init", self.init, INITS)):
            if value not in allowed:
                raise ValueError(f"{name} must be one of {allowed}, got {value!r}")
        if self.alpha_mode == "fixed" and self.alpha_value is None:
            raise ValueError("alpha_mode 'fixed' needs alpha_value")
        if self.b_mode == "fixed" and self.b_value is None:
            raise ValueError("b_mode 'fixed' needs b_value")
        if not 0.0 <= self.rho_value <= 1.0:
            raise ValueError("rho_value must lie in [0, 1]")

    def to_dict(self) -> dict:
        d = asdict(self)
        for key in ("alpha_value", "b_value"):
            if isinstance(d[key], np.ndarray):
                d[key] = d[key].tolist()
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "FitConfig":
        return cls(**d)


@dataclass
class FitResult:
    hyper_hat: Hyperparams
    state: VariationalState
    pi_hat: np.ndarray
    elbo_trace: list
    converged: bool
    iterations: int
    wall_time: float
    n_nodes: int
    diagonal_policy: str
    config: FitConfig | None = None
    checkpoints: list = field(default_factory=list, repr=False)
    notes: list = field(default_factory=list)
    phi_pairs: np.ndarray | None = field(default=None, repr=False)
    term_trace: list = field(default_factory=list, repr=False)

    @property
    def final_elbo(self) -> float:
        return self.elbo_trace[-1]

    def to_dict(self) -> dict:
        return {
            "K": self.hyper_hat.k_groups,
            "alpha": self.hyper_hat.alpha.tolist(),
            "B": self.hyper_hat.block_matrix.tolist(),
            "rho": self.hyper_hat.rho,
            "pi": self.pi_hat.tolist(),
            "elbo_trace": [float(v) for v in self.elbo_trace],
            "converged": bool(self.converged),
            "iterations": int(self.iterations),
            "diagonal_policy": self.diagonal_policy,
            "notes": list(self.notes),
            "config": None if self.config is None else self.config.to_dict(),
        }

    def save(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=1))

    @classmethod
    def from_dict(cls, d: dict) -> "FitResult":
        hyper = Hyperparams(int(d["K"]), d["alpha"], d["B"], d["rho"])
        pi = np.asarray(d["pi"], dtype=float)
        config = FitConfig.from_dict(d["config"]) if d.get("config") else None
        return cls(hyper, VariationalState(gamma=pi.copy()), pi, list(d["elbo_trace"]),
                   bool(d["converged"]), int(d["iterations"]), float(d.get("wall_time_s", 0.0)),
                   pi.shape[0], d.get("diagonal_policy", "excluded"), config,
                   notes=list(d.get("notes", [])))

    @classmethod
    def load(cls, path: str | Path) -> "FitResult":
        return cls.from_dict(json.loads(Path(path).read_text()))


def _initial_hyper(config: FitConfig, train_density: float, rng: np.random.Generator) -> Hyperparams:
    K = config.k_groups
    if config.alpha_value is not None:
        alpha = np.broadcast_to(np.asarray(config.alpha_value, dtype=float), (K,)).copy()
    else:
        alpha = np.full(K, 1.0 / K)
    if config.rho_mode == "fixed_from_density":
        rho = 1.0 - train_density
    elif config.rho_mode == "fixed_value":
        rho = config.rho_value
    else:
        rho = 0.0
    if config.b_mode == "fixed":
        # hard 0/1 rates make the bound -inf for any non-degenerate q, so fixed
        # matrices get the same clamp as estimated ones
        B = np.clip(np.asarray(config.b_value, dtype=float), B_CLAMP, 1.0 - B_CLAMP)
    else:
        base = np.clip(train_density / max(1.0 - rho, 1e-12), B_CLAMP, 1.0 - B_CLAMP)
        spread = rng.uniform(-0.5, 0.5, size=(K, K)) if config.init_jitter else 0.0
        B = np.clip(base * (1.0 + spread), B_CLAMP, 1.0 - B_CLAMP)
    return Hyperparams(K, alpha, B, rho)


def spectral_labels(pairs: PairData, k: int, seed: int = 0) -> np.ndarray:
    """Hard group labels from k-means on a singular-vector embedding.

    Only training pairs enter the adjacency, so held-out entries cannot leak
    into the starting point.  Each node is embedded by its top-k left and
    right singular vectors (scaled by the singular values), rows normalized.
    """
    n = pairs.n_nodes
    adj = np.zeros((n, n))
    np.add.at(adj, (pairs.p, pairs.q), pairs.r.sum(axis=0))
    if k <= 1 or not adj.any():
        return np.zeros(n, dtype=int)
    u, sv, vt = np.linalg.svd(adj)
    emb = np.hstack([u[:, :k] * sv[:k], vt[:k].T * sv[:k]])
    norms = np.linalg.norm(emb, axis=1, keepdims=True)
    emb = np.divide(emb, norms, out=np.zeros_like(emb), where=norms > 0)
    km = KMeans(n_clusters=k, n_init=10, random_state=seed).fit(emb)
    return km.labels_.astype(int)


def _spectral_start(pairs: PairData, hyper: Hyperparams, config: FitConfig, seed: int,
                    train_density: float) -> tuple[Hyperparams, VariationalState]:
    K = hyper.k_groups
    labels = spectral_labels(pairs, K, seed)
    onehot = np.eye(K)[labels]
    share = config.init_strength * onehot + (1.0 - config.init_strength) / K
    gamma = hyper.alpha + pairs.slots[:, None] * share
    if config.b_mode == "estimate":
        g, h = labels[pairs.p], labels[pairs.q]
        edges = np.zeros((K, K))
        total = np.zeros((K, K))
        np.add.at(edges, (g, h), pairs.r.mean(axis=0))
        np.add.at(total, (g, h), 1.0)
        with np.errstate(invalid="ignore", divide="ignore"):
            rate = np.where(total > 0, edges / total, train_density)
        B = np.clip(rate / max(1.0 - hyper.rho, 1e-12), B_CLAMP, 1.0 - B_CLAMP)
        hyper = hyper.replace(block_matrix=B)
    return hyper, VariationalState(gamma)


def mstep(hyper: Hyperparams, gamma: np.ndarray, stats: SuffStats, config: FitConfig,
          train_density: float) -> tuple[Hyperparams, np.ndarray]:
    """Update the hyperparameters the configuration marks for estimation.

    Returns the new hyperparameters and the mask of degenerate block pairs.
    The block estimate is the mass-weighted edge fraction divided by
    (1 - rho), since the model's edge rates are (1 - rho) B.
    """
    if config.rho_mode == "estimate":
        rho = rho_from_stats(stats)
    elif config.rho_mode == "fixed_from_density":
        rho = 1.0 - train_density
    else:
        rho = config.rho_value
    degenerate = np.zeros((hyper.k_groups, hyper.k_groups), dtype=bool)
    if config.b_mode == "estimate" and rho < 1.0:
        ratio, degenerate = block_ratio(stats)
        B = np.clip(ratio / (1.0 - rho), B_CLAMP, 1.0 - B_CLAMP)
        B[degenerate] = DEGENERATE_RATE
    else:
        B = hyper.block_matrix
    if config.alpha_mode == "estimate_vector":
        alpha = mstep_alpha(hyper.alpha, gamma)
    elif config.alpha_mode == "estimate_scalar_symmetric":
        alpha = np.full(hyper.k_groups, mstep_alpha_scalar(float(hyper.alpha.mean()), gamma))
    else:
        alpha = hyper.alpha
    return Hyperparams(hyper.k_groups, alpha, B, rho), degenerate


def _check_finite(bound: inference.ElboBreakdown, where: str) -> None:
    if not np.isfinite(bound.total):
        raise FitError(f"bound is not finite {where}: term {bound.offending_term!r} "
                       f"= {bound.terms.get(bound.offending_term)}")


def fit(data: Network | NetworkSet, config: FitConfig, exclude: PairMask | None = None,
        callback=None) -> FitResult:
    """Variational EM for the blockmodel.

    Pairs in ``exclude`` are treated as missing: they take no part in any
    E-step or M-step sum.  With ``n_init > 1`` the fit is repeated from
    seeds ``seed, seed + 1, ...`` and the run with the highest final bound is
    returned.

    ``callback(iteration, bound, hyper, state)`` is called after every EM
    iteration when given.
    """
    data = as_network_set(data)
    best = None
    for restart in range(max(1, config.n_init)):
        result = _fit_once(data, config, config.seed + restart, exclude, callback)
        if best is None or result.final_elbo > best.final_elbo:
            best = result
    return best


def _fit_once(data: NetworkSet, config: FitConfig, seed: int, exclude: PairMask | None,
              callback) -> FitResult:
    start = time.perf_counter()
    pairs = pair_data(data, exclude)
    if pairs.n_pairs == 0:
        raise ValueError("no training pairs")
    d_train = float(pairs.r.mean())
    rng = np.random.default_rng(seed)
    K = config.k_groups
    hyper = _initial_hyper(config, d_train, rng)
    if config.init == "spectral":
        hyper, state = _spectral_start(pairs, hyper, config, int(rng.integers(2**31)), d_train)
    else:
        state = inference.init_state(data.n_nodes, K, data.n_replicates,
                                     seed=int(rng.integers(2**31)) if config.init_jitter else None,
                                     jitter=config.jitter)
    trace: list[float] = []
    term_trace: list[dict] = []
    checkpoints: list[tuple[float, Hyperparams]] = []
    notes: list[str] = []
    degenerate_seen = np.zeros((K, K), dtype=bool)
    converged = False
    iteration = 0
    for iteration in range(1, config.max_em_iters + 1):
        if config.schedule == "nested":
            est = inference.estep_nested(state, hyper, pairs, config.estep_tol,
                                         config.max_estep_sweeps, config.inner_tol,
                                         config.max_inner, config.threads,
                                         store_phi=config.retain_phi)
        else:
            est = inference.estep_naive(state, hyper, pairs, config.estep_tol,
                                        config.max_estep_sweeps, config.inner_tol,
                                        config.max_inner, config.threads)
        state = est.state
        checkpoints.extend((v, hyper) for v in est.elbo_trace)
        if not est.converged:
            notes.append(f"E-step of iteration {iteration} hit max_estep_sweeps")
        hyper, degenerate = mstep(hyper, state.gamma, state.stats, config, d_train)
        degenerate_seen |= degenerate
        bound = inference.elbo_from_stats(state.gamma, state.stats, hyper)
        _check_finite(bound, f"after EM iteration {iteration}")
        trace.append(bound.total)
        term_trace.append(dict(bound.terms))
        checkpoints.append((bound.total, hyper))
        if callback is not None:
            callback(iteration, bound, hyper, state)
        logger.debug("EM iteration %d: bound %.6f", iteration, bound.total)
        if len(trace) > 1 and inference._rel_change(trace[-1], trace[-2]) < config.em_tol:
            converged = True
            break
    if degenerate_seen.any():
        notes.append(f"degenerate block pairs defaulted to {DEGENERATE_RATE}: "
                     f"{[tuple(int(i) for i in c) for c in np.argwhere(degenerate_seen)]}")
    pi_hat = state.gamma / state.gamma.sum(axis=1, keepdims=True)
    phi_pairs = np.column_stack([pairs.p, pairs.q]) if state.has_phi else None
    return FitResult(hyper, state, pi_hat, trace, converged, iteration,
                     time.perf_counter() - start, data.n_nodes, data.diagonal_policy,
                     config, checkpoints, notes, phi_pairs, term_trace)
