"""Variational E-step for the mixed membership blockmodel.

Two schedules are provided.  The naive schedule stores every pair's
indicator distributions, updates all of them against a fixed gamma, then
recomputes gamma.  The nested schedule walks the pairs once per sweep,
solving each pair to convergence and folding the result into gamma and
the block statistics immediately, so it never holds per-pair state.

Both schedules share :class:`SuffStats`, the pair-summed quantities from
which the bound and the M-step are computed.
"""

from __future__ import annotations

import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace

import numpy as np
from scipy.special import digamma, gammaln

from . import _kernels
from .genmodel import Hyperparams
from .netdata import Network, NetworkSet, PairData, PairMask, pair_data

logger = logging.getLogger(__name__)

INNER_TOL = 1e-8
MAX_INNER = 100
ESTEP_TOL = 1e-5
_LOG_FLOOR = 1e-300

TERM_NAMES = ("likelihood", "prior_out", "prior_in", "dirichlet_prior",
              "dirichlet_entropy", "entropy_out", "entropy_in")


@dataclass
class SuffStats:
    """Pair sums of the indicator distributions.

    out_sum[p] / in_sum[p]
        Total initiator / receiver mass assigned to node p's slots.
    s1[m] / s0[m]
        Sum over edge / non-edge pairs of replicate m of phi_out phi_in'.
    entropy_out / entropy_in
        Summed entropies of the initiator / receiver distributions.
    """

    out_sum: np.ndarray
    in_sum: np.ndarray
    s1: np.ndarray
    s0: np.ndarray
    entropy_out: float = 0.0
    entropy_in: float = 0.0
    max_inner_iters: int = 0

    @classmethod
    def zeros(cls, n_nodes: int, k: int, n_replicates: int) -> "SuffStats":
        return cls(np.zeros((n_nodes, k)), np.zeros((n_nodes, k)),
                   np.zeros((n_replicates, k, k)), np.zeros((n_replicates, k, k)))


@dataclass
class VariationalState:
    """Variational parameters.

    ``gamma`` has shape (N, K).  ``phi_out``/``phi_in`` have shape (M, P, K)
    over the training pairs in :func:`~mmsb.netdata.pair_data` order, or are
    None when the schedule did not keep them; ``stats`` then carries what the
    bound needs.
    """

    gamma: np.ndarray
    phi_out: np.ndarray | None = None
    phi_in: np.ndarray | None = None
    stats: SuffStats | None = field(default=None, repr=False)

    @property
    def has_phi(self) -> bool:
        return self.phi_out is not None

    def copy(self) -> "VariationalState":
        return VariationalState(
            self.gamma.copy(),
            None if self.phi_out is None else self.phi_out.copy(),
            None if self.phi_in is None else self.phi_in.copy(),
            None if self.stats is None else replace(self.stats),
        )


@dataclass(frozen=True)
class ElboBreakdown:
    total: float
    terms: dict

    @property
    def offending_term(self) -> str | None:
        for name, value in self.terms.items():
            if not np.isfinite(value):
                return name
        return None


@dataclass
class EStepResult:
    state: VariationalState
    elbo_trace: list
    converged: bool
    n_sweeps: int


def _as_pairs(data: Network | NetworkSet | PairData, exclude: PairMask | None = None) -> PairData:
    if isinstance(data, PairData):
        return data
    return pair_data(data, exclude)


# -- closed-form pieces --------------------------------------------------------------


def expected_log_pi(gamma) -> np.ndarray:
    """E[log pi] under Dirichlet(gamma): digamma(gamma) - digamma(sum gamma).

    Works row-wise on an (N, K) array as well as on a single K-vector.
    """
    gamma = np.asarray(gamma, dtype=float)
    if np.any(~(gamma > 0)):
        raise ValueError("Dirichlet parameters must be positive")
    return digamma(gamma) - digamma(gamma.sum(axis=-1, keepdims=True))


def log_rates(hyper: Hyperparams) -> tuple[np.ndarray, np.ndarray]:
    """Log-likelihood tables for an observed edge and non-edge.

    Uses the sparsity-adjusted rates (1 - rho) B.  Rates of exactly 0 or 1
    are floored so that the fixed-point updates stay finite; the bound itself
    is evaluated without the floor.
    """
    rate = hyper.effective_block
    F1 = np.log(np.maximum(rate, _LOG_FLOOR))
    F0 = np.log(np.maximum(1.0 - rate, _LOG_FLOOR))
    return F1, F0


def update_phi_pair(r: int, gamma_p, gamma_q, hyper: Hyperparams,
                    tol: float = INNER_TOL, max_inner: int = MAX_INNER):
    """Solve one pair's initiator and receiver distributions.

    Returns ``(phi_out, phi_in, n_iters)``.
    """
    if tol <= 0:
        raise ValueError("tol must be positive")
    K = hyper.k_groups
    F1, F0 = log_rates(hyper)
    elog_p = expected_log_pi(gamma_p)
    elog_q = expected_log_pi(gamma_q)
    phi_out, phi_in, work = np.empty(K), np.empty(K), np.empty(K)
    it = _kernels.phi_pair(F1 if r == 1 else F0, elog_p, elog_q, float(tol), int(max_inner),
                           phi_out, phi_in, work)
    if not (np.all(np.isfinite(phi_out)) and np.all(np.isfinite(phi_in))):
        raise FloatingPointError("indicator update produced non-finite values")
    return phi_out, phi_in, int(it)


def update_gamma(state: VariationalState, alpha, node: int,
                 data: Network | NetworkSet | PairData, exclude: PairMask | None = None) -> np.ndarray:
    """alpha + every initiator slot of ``node`` + every receiver slot of ``node``."""
    if not state.has_phi:
        raise ValueError("update_gamma needs stored indicator distributions")
    pairs = _as_pairs(data, exclude)
    out = state.phi_out[:, pairs.p == node, :].sum(axis=(0, 1))
    inc = state.phi_in[:, pairs.q == node, :].sum(axis=(0, 1))
    return np.asarray(alpha, dtype=float) + out + inc


def stats_from_phi(pairs: PairData, phi_out: np.ndarray, phi_in: np.ndarray) -> SuffStats:
    N, (M, _, K) = pairs.n_nodes, phi_out.shape
    out_sum = np.zeros((N, K))
    in_sum = np.zeros((N, K))
    np.add.at(out_sum, pairs.p, phi_out.sum(axis=0))
    np.add.at(in_sum, pairs.q, phi_in.sum(axis=0))
    r = pairs.r.astype(float)
    s1 = np.einsum("mi,mig,mih->mgh", r, phi_out, phi_in)
    s0 = np.einsum("mi,mig,mih->mgh", 1.0 - r, phi_out, phi_in)
    with np.errstate(divide="ignore", invalid="ignore"):
        ent_out = -np.sum(np.where(phi_out > 0, phi_out * np.log(phi_out), 0.0))
        ent_in = -np.sum(np.where(phi_in > 0, phi_in * np.log(phi_in), 0.0))
    return SuffStats(out_sum, in_sum, s1, s0, float(ent_out), float(ent_in))


def gamma_from_stats(alpha, stats: SuffStats) -> np.ndarray:
    return np.asarray(alpha, dtype=float) + stats.out_sum + stats.in_sum


def _xlogy(x, y):
    with np.errstate(divide="ignore", invalid="ignore"):
        return np.where(x > 0, x * np.log(y), 0.0)


def elbo_from_stats(gamma: np.ndarray, stats: SuffStats, hyper: Hyperparams) -> ElboBreakdown:
    alpha = hyper.alpha
    rate = hyper.effective_block
    elog = expected_log_pi(gamma)
    n = gamma.shape[0]
    terms = {
        "likelihood": float(np.sum(_xlogy(stats.s1, rate)) + np.sum(_xlogy(stats.s0, 1.0 - rate))),
        "prior_out": float(np.sum(stats.out_sum * elog)),
        "prior_in": float(np.sum(stats.in_sum * elog)),
        "dirichlet_prior": float(n * (gammaln(alpha.sum()) - gammaln(alpha).sum())
                                 + np.sum((alpha - 1.0) * elog)),
        "dirichlet_entropy": float(-np.sum(gammaln(gamma.sum(axis=1)))
                                   + np.sum(gammaln(gamma))
                                   - np.sum((gamma - 1.0) * elog)),
        "entropy_out": stats.entropy_out,
        "entropy_in": stats.entropy_in,
    }
    return ElboBreakdown(float(sum(terms.values())), terms)


def elbo(state: VariationalState, hyper: Hyperparams, data: Network | NetworkSet | PairData,
         exclude: PairMask | None = None) -> ElboBreakdown:
    """Evidence lower bound at ``state`` and ``hyper``.

    Uses the stored indicator distributions when present and the state's
    sufficient statistics otherwise.
    """
    if state.has_phi:
        pairs = _as_pairs(data, exclude)
        if state.phi_out.shape[:2] != pairs.r.shape:
            raise ValueError("state does not match the data's training pairs")
        stats = stats_from_phi(pairs, state.phi_out, state.phi_in)
    elif state.stats is not None:
        stats = state.stats
    else:
        raise ValueError("state carries neither indicator distributions nor statistics")
    if state.gamma.shape != (stats.out_sum.shape[0], hyper.k_groups):
        raise ValueError("gamma shape does not match data and hyperparameters")
    return elbo_from_stats(state.gamma, stats, hyper)


# -- initialization ----------------------------------------------------------------


def init_state(n_nodes: int, k: int, n_replicates: int = 1, seed: int | None = None,
               jitter: float = 0.05) -> VariationalState:
    """gamma = 2 N M / K everywhere, optionally times (1 + U(-jitter, jitter))."""
    gamma = np.full((n_nodes, k), 2.0 * n_nodes * n_replicates / k)
    if seed is not None and jitter > 0:
        rng = np.random.default_rng(seed)
        gamma *= 1.0 + rng.uniform(-jitter, jitter, size=gamma.shape)
    return VariationalState(gamma)


def uniform_phi(pairs: PairData, k: int) -> tuple[np.ndarray, np.ndarray]:
    shape = (pairs.n_replicates, pairs.n_pairs, k)
    return np.full(shape, 1.0 / k), np.full(shape, 1.0 / k)


def _chunks(total: int, n: int) -> list[tuple[int, int]]:
    n = max(1, min(n, total)) if total else 1
    bounds = np.linspace(0, total, n + 1).round().astype(int)
    return [(int(a), int(b)) for a, b in zip(bounds[:-1], bounds[1:])]


def _run_chunks(fn, chunks, threads: int):
    if threads <= 1 or len(chunks) == 1:
        return [fn(c) for c in chunks]
    with ThreadPoolExecutor(max_workers=threads) as pool:
        return list(pool.map(fn, chunks))


# -- naive schedule ------------------------------------------------------------------


def naive_sweep(state: VariationalState, hyper: Hyperparams, pairs: PairData,
                tol: float = INNER_TOL, max_inner: int = MAX_INNER,
                threads: int = 1) -> tuple[VariationalState, ElboBreakdown, ElboBreakdown]:
    """One naive sweep: every pair against the current gamma, then gamma.

    Pairs restart from their stored distributions when the state has them,
    which keeps every update an exact coordinate step.  Returns the new
    state, the bound after the indicator step and the bound after the gamma
    step.
    """
    K = hyper.k_groups
    elog = expected_log_pi(state.gamma)
    F1, F0 = log_rates(hyper)
    shape = (pairs.n_replicates, pairs.n_pairs, K)
    warm = state.has_phi
    if warm:
        phi_out, phi_in = state.phi_out.copy(), state.phi_in.copy()
    else:
        phi_out, phi_in = np.empty(shape), np.empty(shape)
    iters = np.zeros(shape[:2], dtype=np.int64)

    def work(chunk):
        _kernels.jacobi_pass(pairs.p, pairs.q, pairs.r, chunk[0], chunk[1], elog, F1, F0,
                             float(tol), int(max_inner), phi_out, phi_in, iters, warm)

    _run_chunks(work, _chunks(shape[0] * shape[1], threads), threads)
    stats = stats_from_phi(pairs, phi_out, phi_in)
    stats.max_inner_iters = int(iters.max()) if iters.size else 0
    after_phi = elbo_from_stats(state.gamma, stats, hyper)
    gamma = gamma_from_stats(hyper.alpha, stats)
    new = VariationalState(gamma, phi_out, phi_in, stats)
    return new, after_phi, elbo_from_stats(gamma, stats, hyper)


def _rel_change(new: float, old: float) -> float:
    if new == old:
        return 0.0
    return abs(new - old) / max(abs(old), 1e-300)


def estep_naive(state: VariationalState, hyper: Hyperparams,
                data: Network | NetworkSet | PairData, tol: float = ESTEP_TOL,
                max_sweeps: int = 1000, inner_tol: float = INNER_TOL,
                max_inner: int = MAX_INNER, threads: int = 1,
                exclude: PairMask | None = None) -> EStepResult:
    """Alternate full indicator and gamma updates until the bound settles.

    The trace starts with the bound at the incoming state (uniform indicator
    distributions are filled in if the state has none) and then records the
    bound after every sweep.  With the hyperparameters fixed each update is
    exact coordinate ascent, so the trace never decreases.
    """
    pairs = _as_pairs(data, exclude)
    state = state.copy()
    if not state.has_phi:
        state.phi_out, state.phi_in = uniform_phi(pairs, hyper.k_groups)
    trace = [elbo(state, hyper, pairs).total]
    for sweep in range(1, max_sweeps + 1):
        state, _, after = naive_sweep(state, hyper, pairs, inner_tol, max_inner, threads)
        trace.append(after.total)
        if _rel_change(trace[-1], trace[-2]) < tol:
            return EStepResult(state, trace, True, sweep)
    logger.info("naive E-step stopped after %d sweeps without converging", max_sweeps)
    return EStepResult(state, trace, False, max_sweeps)


# -- nested schedule -----------------------------------------------------------------


def estep_nested_sweep(state: VariationalState, hyper: Hyperparams, pairs: PairData,
                       tol: float = INNER_TOL, max_inner: int = MAX_INNER, threads: int = 1,
                       store_phi: bool = False) -> VariationalState:
    """One pass of the nested schedule over all training pairs.

    Pairs are visited in row-major order.  Each is solved twice: against the
    sweep-start gamma, which stands in for the pair's previous contribution,
    and against the working gamma, which already reflects earlier pairs of
    the sweep.  The working gamma of both endpoints moves by the difference.
    Only O(NK + K^2) is held besides the data; after the sweep gamma is set
    to alpha plus the summed distributions, so the returned state is
    consistent with its statistics.

    With ``threads > 1`` the pairs are split into contiguous chunks that each
    start from the sweep-start gamma, and the statistics are summed in chunk
    order.  ``threads == 1`` is the deterministic reference.

    The returned state carries :class:`SuffStats` in place of per-pair
    distributions unless ``store_phi`` is set.
    """
    K, N, M = hyper.k_groups, pairs.n_nodes, pairs.n_replicates
    gamma_ref = np.ascontiguousarray(state.gamma, dtype=float)
    if gamma_ref.shape != (N, K) or np.any(~(gamma_ref > 0)):
        raise ValueError("gamma must be a positive N x K matrix")
    elog_ref = expected_log_pi(gamma_ref)
    F1, F0 = log_rates(hyper)
    if store_phi:
        phi_out, phi_in = np.zeros((M, pairs.n_pairs, K)), np.zeros((M, pairs.n_pairs, K))
    else:
        phi_out = phi_in = np.zeros((1, 1, K))

    def work(chunk):
        st = SuffStats.zeros(N, K, M)
        ent = np.zeros(2)
        worst = _kernels.nested_pass(pairs.p, pairs.q, pairs.r, chunk[0], chunk[1], gamma_ref,
                                     elog_ref, gamma_ref.copy(), F1, F0, float(tol), int(max_inner),
                                     st.out_sum, st.in_sum, st.s1, st.s0, ent, store_phi,
                                     phi_out, phi_in)
        st.entropy_out, st.entropy_in, st.max_inner_iters = float(ent[0]), float(ent[1]), int(worst)
        return st

    results = _run_chunks(work, _chunks(M * pairs.n_pairs, threads), threads)
    stats = results[0]
    for st in results[1:]:
        stats.out_sum += st.out_sum
        stats.in_sum += st.in_sum
        stats.s1 += st.s1
        stats.s0 += st.s0
        stats.entropy_out += st.entropy_out
        stats.entropy_in += st.entropy_in
        stats.max_inner_iters = max(stats.max_inner_iters, st.max_inner_iters)
    gamma = gamma_from_stats(hyper.alpha, stats)
    if store_phi:
        return VariationalState(gamma, phi_out, phi_in, stats)
    return VariationalState(gamma, None, None, stats)


def estep_nested(state: VariationalState, hyper: Hyperparams,
                 data: Network | NetworkSet | PairData, tol: float = ESTEP_TOL,
                 max_sweeps: int = 1000, inner_tol: float = INNER_TOL,
                 max_inner: int = MAX_INNER, threads: int = 1,
                 exclude: PairMask | None = None, store_phi: bool = False) -> EStepResult:
    """Nested sweeps at fixed hyperparameters until the bound settles."""
    pairs = _as_pairs(data, exclude)
    trace = []
    for sweep in range(1, max_sweeps + 1):
        state = estep_nested_sweep(state, hyper, pairs, inner_tol, max_inner, threads, store_phi)
        trace.append(elbo_from_stats(state.gamma, state.stats, hyper).total)
        if len(trace) > 1 and _rel_change(trace[-1], trace[-2]) < tol:
            return EStepResult(state, trace, True, sweep)
    return EStepResult(state, trace, False, max_sweeps)
