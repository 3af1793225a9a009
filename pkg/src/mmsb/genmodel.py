"""Model hyperparameters and the generative sampler."""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .netdata import EXCLUDED, Network, NetworkSet, valid_pairs


@dataclass(frozen=True)
class Hyperparams:
    """K, the Dirichlet concentration, the block matrix and sparsity.

    ``alpha`` may be given as a scalar, in which case it is broadcast to a
    symmetric K-vector.
    """

    k_groups: int
    alpha: np.ndarray
    block_matrix: np.ndarray
    rho: float = 0.0

    def __post_init__(self):
        k = int(self.k_groups)
        if k < 1:
            raise ValueError("k_groups must be positive")
        alpha = np.asarray(self.alpha, dtype=float)
        if alpha.ndim == 0:
            alpha = np.full(k, float(alpha))
        B = np.asarray(self.block_matrix, dtype=float)
        if alpha.shape != (k,):
            raise ValueError(f"alpha must have length {k}")
        if B.shape != (k, k):
            raise ValueError(f"block_matrix must be {k}x{k}")
        if not np.all(alpha > 0) or not np.all(np.isfinite(alpha)):
            raise ValueError("alpha entries must be positive and finite")
        if not np.all((B >= 0) & (B <= 1)):
            raise ValueError("block_matrix entries must lie in [0, 1]")
        rho = float(self.rho)
        if not 0.0 <= rho <= 1.0:
            raise ValueError("rho must lie in [0, 1]")
        alpha.setflags(write=False)
        B.setflags(write=False)
        object.__setattr__(self, "k_groups", k)
        object.__setattr__(self, "alpha", alpha)
        object.__setattr__(self, "block_matrix", B)
        object.__setattr__(self, "rho", rho)

    @property
    def effective_block(self) -> np.ndarray:
        """Edge rates after sparsity downweighting, (1 - rho) * B."""
        return (1.0 - self.rho) * self.block_matrix

    def replace(self, **changes) -> "Hyperparams":
        fields = dict(k_groups=self.k_groups, alpha=self.alpha,
                      block_matrix=self.block_matrix, rho=self.rho)
        fields.update(changes)
        return Hyperparams(**fields)

    def to_dict(self) -> dict:
        return {"K": self.k_groups, "alpha": self.alpha.tolist(),
                "B": self.block_matrix.tolist(), "rho": self.rho}

    @classmethod
    def from_dict(cls, d: dict) -> "Hyperparams":
        return cls(int(d["K"]), d["alpha"], d["B"], d.get("rho", 0.0))

    def save(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2))

    @classmethod
    def load(cls, path: str | Path) -> "Hyperparams":
        return cls.from_dict(json.loads(Path(path).read_text()))


@dataclass(frozen=True)
class SampleTruth:
    """Ground truth of a draw: memberships and per-pair group indicators.

    ``z_out[m, p, q]`` is the initiator group of pair (p, q) in replicate m and
    ``z_in[m, p, q]`` the receiver group; -1 marks pairs outside the model.
    """

    pi: np.ndarray
    z_out: np.ndarray
    z_in: np.ndarray

    @property
    def k_groups(self) -> int:
        return self.pi.shape[1]

    def one_hot_out(self) -> np.ndarray:
        return _one_hot(self.z_out, self.k_groups)

    def one_hot_in(self) -> np.ndarray:
        return _one_hot(self.z_in, self.k_groups)

    def save(self, path: str | Path, indicators_path: str | Path | None = None) -> None:
        Path(path).write_text(json.dumps({"pi": self.pi.tolist()}))
        if indicators_path is not None:
            with open(indicators_path, "wb") as fh:
                np.savez_compressed(fh, z_out=self.z_out, z_in=self.z_in)


def _one_hot(z: np.ndarray, k: int) -> np.ndarray:
    out = np.zeros(z.shape + (k,), dtype=np.int8)
    m, p, q = np.nonzero(z >= 0)
    out[m, p, q, z[m, p, q]] = 1
    return out


def _dirichlet(rng: np.random.Generator, alpha: np.ndarray) -> np.ndarray:
    # log Gamma(a) = log Gamma(a + 1) + log(U) / a stays finite for tiny a
    log_g = np.log(rng.standard_gamma(alpha + 1.0)) + np.log(rng.random(len(alpha))) / alpha
    w = np.exp(log_g - log_g.max())
    return w / w.sum()


def _categorical(cdfs: np.ndarray, u: np.ndarray) -> np.ndarray:
    """Inverse-CDF draws; row i of ``cdfs`` is used with ``u[i]``."""
    idx = (cdfs <= (u * cdfs[:, -1])[:, None]).sum(axis=1)
    return np.minimum(idx, cdfs.shape[1] - 1)


def sample_network(hyper: Hyperparams, n_nodes: int, n_replicates: int = 1, seed: int = 0,
                   diagonal_policy: str = EXCLUDED,
                   symmetric: bool = False) -> tuple[NetworkSet, SampleTruth]:
    """Draw replicated networks from the mixed membership blockmodel.

    Random streams come from ``numpy.random.SeedSequence(seed)``, which spawns
    a membership stream and a pair stream.  The membership stream spawns one
    child per node (its Dirichlet draw); the pair stream spawns one child per
    replicate, which spawns one child per initiator node p.  Row p's child
    draws three uniforms per pair (p, q) in increasing q: initiator group,
    receiver group, edge.  Rows are thus independent of processing order.

    With ``symmetric`` only pairs p < q are drawn, and (q, p) mirrors them.
    """
    if n_nodes < 2:
        raise ValueError("n_nodes must be at least 2")
    if n_replicates < 1:
        raise ValueError("n_replicates must be at least 1")
    K = hyper.k_groups
    membership_ss, pair_ss = np.random.SeedSequence(seed).spawn(2)
    pi = np.vstack([_dirichlet(np.random.default_rng(s), hyper.alpha)
                    for s in membership_ss.spawn(n_nodes)])
    cdfs = np.cumsum(pi, axis=1)
    rate = hyper.effective_block

    shape = (n_replicates, n_nodes, n_nodes)
    adj = np.zeros(shape, dtype=np.int8)
    z_out = np.full(shape, -1, dtype=np.int64)
    z_in = np.full(shape, -1, dtype=np.int64)
    p_all, q_all = valid_pairs(n_nodes, diagonal_policy)
    for m, rep_ss in enumerate(pair_ss.spawn(n_replicates)):
        for p, row_ss in enumerate(rep_ss.spawn(n_nodes)):
            qs = q_all[p_all == p]
            if symmetric:
                qs = qs[qs >= p]
            if len(qs) == 0:
                continue
            u = np.random.default_rng(row_ss).random((len(qs), 3))
            g = _categorical(np.broadcast_to(cdfs[p], (len(qs), K)), u[:, 0])
            h = _categorical(cdfs[qs], u[:, 1])
            r = (u[:, 2] < rate[g, h]).astype(np.int8)
            z_out[m, p, qs], z_in[m, p, qs], adj[m, p, qs] = g, h, r
            if symmetric:
                off = qs != p
                z_out[m, qs[off], p] = h[off]
                z_in[m, qs[off], p] = g[off]
                adj[m, qs[off], p] = r[off]
    nets = NetworkSet(tuple(Network(a, diagonal_policy) for a in adj))
    return nets, SampleTruth(pi, z_out, z_in)


def _check_simplex(v: np.ndarray, name: str, atol: float = 1e-8) -> np.ndarray:
    v = np.asarray(v, dtype=float)
    if np.any(v < -atol) or abs(v.sum() - 1.0) > atol:
        raise ValueError(f"{name} is not on the simplex")
    return v


def edge_prob_given_memberships(pi_p, pi_q, hyper: Hyperparams) -> float:
    """Marginal edge probability (1 - rho) * pi_p' B pi_q."""
    pi_p = _check_simplex(pi_p, "pi_p")
    pi_q = _check_simplex(pi_q, "pi_q")
    return float(pi_p @ hyper.effective_block @ pi_q)
