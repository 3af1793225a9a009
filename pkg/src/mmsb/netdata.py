"""Directed binary relational data: networks, replicate sets, folds."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

EXCLUDED = "excluded"
INCLUDED = "included"
_POLICIES = (EXCLUDED, INCLUDED)


class InputError(ValueError):
    """Malformed network or mask file."""


@dataclass(frozen=True)
class Network:
    """A single directed binary relation on ``n_nodes`` nodes.

    Parameters
    ----------
    adjacency : array_like, shape (N, N)
        Entries in {0, 1}; ``adjacency[p, q] == 1`` means p -> q.
    diagonal_policy : {"excluded", "included"}
        Whether self-pairs (p, p) take part in the model.
    node_labels : sequence of str, optional
    """

    adjacency: np.ndarray
    diagonal_policy: str = EXCLUDED
    node_labels: tuple[str, ...] | None = None

    def __post_init__(self):
        adj = np.asarray(self.adjacency)
        if adj.ndim != 2 or adj.shape[0] != adj.shape[1] or adj.shape[0] < 1:
            raise InputError(f"adjacency must be a non-empty square matrix, got shape {adj.shape}")
        if not np.all((adj == 0) | (adj == 1)):
            p, q = np.argwhere((adj != 0) & (adj != 1))[0]
            raise InputError(f"non-binary value {adj[p, q]!r} at row {p}, column {q}")
        if self.diagonal_policy not in _POLICIES:
            raise InputError(f"diagonal_policy must be one of {_POLICIES}")
        adj = adj.astype(np.int8)
        if self.diagonal_policy == EXCLUDED and np.any(np.diag(adj)):
            p = int(np.flatnonzero(np.diag(adj))[0])
            raise InputError(f"self-edge at row {p}, column {p} with diagonal excluded")
        adj.setflags(write=False)
        object.__setattr__(self, "adjacency", adj)
        if self.node_labels is not None:
            labels = tuple(str(s) for s in self.node_labels)
            if len(labels) != adj.shape[0]:
                raise InputError("node_labels length does not match adjacency")
            object.__setattr__(self, "node_labels", labels)

    @property
    def n_nodes(self) -> int:
        return self.adjacency.shape[0]

    @property
    def n_edges(self) -> int:
        return int(self.adjacency.sum())

    def valid_pairs(self) -> tuple[np.ndarray, np.ndarray]:
        """Row-major (p, q) index arrays over the pairs that enter the model."""
        return valid_pairs(self.n_nodes, self.diagonal_policy)

    def __eq__(self, other):
        if not isinstance(other, Network):
            return NotImplemented
        return (
            self.diagonal_policy == other.diagonal_policy
            and self.node_labels == other.node_labels
            and np.array_equal(self.adjacency, other.adjacency)
        )

    __hash__ = None


def valid_pairs(n_nodes: int, diagonal_policy: str = EXCLUDED) -> tuple[np.ndarray, np.ndarray]:
    p, q = np.divmod(np.arange(n_nodes * n_nodes), n_nodes)
    if diagonal_policy == EXCLUDED:
        keep = p != q
        p, q = p[keep], q[keep]
    return p, q


@dataclass(frozen=True)
class NetworkSet:
    """M independent replicates of a relation on the same node set."""

    replicates: tuple[Network, ...]

    def __post_init__(self):
        reps = tuple(self.replicates)
        if not reps:
            raise InputError("a NetworkSet needs at least one replicate")
        n, pol = reps[0].n_nodes, reps[0].diagonal_policy
        for m, net in enumerate(reps):
            if net.n_nodes != n or net.diagonal_policy != pol:
                raise InputError(f"replicate {m} is inconsistent with replicate 0")
        object.__setattr__(self, "replicates", reps)

    @classmethod
    def of(cls, *nets: Network | np.ndarray, diagonal_policy: str = EXCLUDED) -> "NetworkSet":
        reps = [n if isinstance(n, Network) else Network(n, diagonal_policy) for n in nets]
        return cls(tuple(reps))

    @property
    def n_nodes(self) -> int:
        return self.replicates[0].n_nodes

    @property
    def n_replicates(self) -> int:
        return len(self.replicates)

    @property
    def diagonal_policy(self) -> str:
        return self.replicates[0].diagonal_policy

    def stacked(self) -> np.ndarray:
        """Adjacency tensor of shape (M, N, N)."""
        return np.stack([net.adjacency for net in self.replicates])

    def n_positive(self) -> int:
        return sum(net.n_edges for net in self.replicates)


def as_network_set(data: Network | NetworkSet) -> NetworkSet:
    return data if isinstance(data, NetworkSet) else NetworkSet((data,))


@dataclass(frozen=True)
class PairMask:
    """Ordered pairs held out of training, as an (H, 2) integer array."""

    held_out: np.ndarray
    fold_id: int = 0

    def __post_init__(self):
        arr = np.asarray(self.held_out, dtype=np.int64).reshape(-1, 2)
        arr.setflags(write=False)
        object.__setattr__(self, "held_out", arr)

    def __len__(self):
        return len(self.held_out)

    def pairs(self) -> set[tuple[int, int]]:
        return {(int(p), int(q)) for p, q in self.held_out}

    def matrix(self, n_nodes: int) -> np.ndarray:
        """Boolean N x N indicator of the held-out pairs."""
        out = np.zeros((n_nodes, n_nodes), dtype=bool)
        out[self.held_out[:, 0], self.held_out[:, 1]] = True
        return out


@dataclass(frozen=True)
class PairData:
    """Flattened view of the training pairs that inference iterates over.

    ``p`` and ``q`` are shared by all replicates; ``r`` has shape (M, P).
    """

    n_nodes: int
    p: np.ndarray
    q: np.ndarray
    r: np.ndarray
    slots: np.ndarray = field(repr=False)

    @property
    def n_pairs(self) -> int:
        return len(self.p)

    @property
    def n_replicates(self) -> int:
        return self.r.shape[0]


def pair_data(data: Network | NetworkSet, exclude: PairMask | None = None) -> PairData:
    """Collect the training pairs of ``data`` in row-major order.

    Pairs in ``exclude`` are dropped entirely, so their values are never read.
    """
    data = as_network_set(data)
    n = data.n_nodes
    p, q = valid_pairs(n, data.diagonal_policy)
    if exclude is not None and len(exclude):
        keep = ~exclude.matrix(n)[p, q]
        p, q = p[keep], q[keep]
    r = np.stack([net.adjacency[p, q] for net in data.replicates]).astype(np.int8)
    # indicator slots per node: one per outgoing and one per incoming pair, per replicate
    slots = (np.bincount(p, minlength=n) + np.bincount(q, minlength=n)) * data.n_replicates
    return PairData(n, p.astype(np.int64), q.astype(np.int64), r, slots.astype(np.float64))


def density(data: Network | NetworkSet) -> float:
    """Fraction of valid pairs carrying an edge, averaged over replicates."""
    data = as_network_set(data)
    p, q = valid_pairs(data.n_nodes, data.diagonal_policy)
    if len(p) == 0:
        return 0.0
    return float(data.stacked()[:, p, q].mean())


def split_folds(net: Network, n_folds: int, seed: int, stratify: bool = True) -> list[PairMask]:
    """Partition the valid ordered pairs of ``net`` into ``n_folds`` masks.

    With ``stratify`` the edge and non-edge pairs are dealt out separately so
    that each stratum's fold sizes differ by at most one.
    """
    if n_folds < 2:
        raise ValueError("n_folds must be at least 2")
    p, q = net.valid_pairs()
    if len(p) < n_folds:
        raise ValueError(f"cannot split {len(p)} pairs into {n_folds} folds")
    rng = np.random.default_rng(seed)
    fold = np.empty(len(p), dtype=np.int64)
    if stratify:
        is_edge = net.adjacency[p, q] == 1
        offset = 0
        for stratum in (np.flatnonzero(is_edge), np.flatnonzero(~is_edge)):
            order = rng.permutation(stratum)
            # continue dealing where the previous stratum stopped to balance totals
            fold[order] = (offset + np.arange(len(order))) % n_folds
            offset += len(order)
    else:
        fold[rng.permutation(len(p))] = np.arange(len(p)) % n_folds
    masks = []
    for f in range(n_folds):
        idx = np.sort(np.flatnonzero(fold == f))
        masks.append(PairMask(np.column_stack([p[idx], q[idx]]), fold_id=f))
    return masks


def reorder_by_membership(net: Network, memberships: np.ndarray) -> tuple[Network, np.ndarray]:
    """Group nodes by their most likely membership.

    Returns the permuted network ``A[perm][:, perm]`` and ``perm``.  Ties on
    the argmax go to the lowest group index; order within a group is stable.
    """
    memberships = np.asarray(memberships, dtype=float)
    if memberships.shape[0] != net.n_nodes:
        raise ValueError("memberships must have one row per node")
    bad = np.flatnonzero(np.abs(memberships.sum(axis=1) - 1.0) > 1e-8)
    if len(bad) or np.any(memberships < 0):
        raise ValueError(f"membership rows not on the simplex (first bad row: {bad[:1].tolist()})")
    perm = np.argsort(memberships.argmax(axis=1), kind="stable")
    labels = None if net.node_labels is None else [net.node_labels[i] for i in perm]
    return Network(net.adjacency[np.ix_(perm, perm)], net.diagonal_policy, labels), perm


# -- file formats -----------------------------------------------------------------


def load_network(path: str | Path, format: str = "dense_csv",
                 diagonal_policy: str = EXCLUDED) -> Network:
    """Read a network from ``dense_csv`` or ``edge_list_tsv``.

    dense_csv holds N rows of N comma-separated 0/1 values.  edge_list_tsv
    starts with a header line ``N=<int>`` followed by one ``src<TAB>dst``
    line per edge, 0-indexed.
    """
    text = Path(path).read_text()
    if format == "dense_csv":
        adj = _parse_dense(text)
    elif format == "edge_list_tsv":
        adj = _parse_edges(text)
    else:
        raise ValueError(f"unknown network format {format!r}")
    return Network(adj, diagonal_policy)


def _parse_dense(text: str) -> np.ndarray:
    rows = [line for line in text.splitlines() if line.strip()]
    if not rows:
        raise InputError("empty dense_csv file")
    n = len(rows)
    adj = np.zeros((n, n), dtype=np.int8)
    for i, line in enumerate(rows):
        cells = [c.strip() for c in line.split(",")]
        if len(cells) != n:
            raise InputError(f"row {i} has {len(cells)} columns, expected {n}")
        for j, c in enumerate(cells):
            if c not in ("0", "1"):
                raise InputError(f"non-binary value {c!r} at row {i}, column {j}")
            adj[i, j] = int(c)
    return adj


def _parse_edges(text: str) -> np.ndarray:
    lines = text.splitlines()
    if not lines or not lines[0].strip().startswith("N="):
        raise InputError("edge_list_tsv must start with a header line 'N=<int>'")
    try:
        n = int(lines[0].strip()[2:])
    except ValueError:
        raise InputError(f"bad header line {lines[0]!r}") from None
    if n < 1:
        raise InputError("N must be positive")
    adj = np.zeros((n, n), dtype=np.int8)
    for lineno, line in enumerate(lines[1:], start=2):
        if not line.strip():
            continue
        parts = line.split("\t")
        if len(parts) == 3:
            # optional third column carries the edge value
            if parts[2].strip() != "1":
                raise InputError(f"non-binary value {parts[2].strip()!r} on line {lineno}")
        elif len(parts) != 2:
            raise InputError(f"line {lineno}: expected '<src>\\t<dst>'")
        try:
            src, dst = int(parts[0]), int(parts[1])
        except ValueError:
            raise InputError(f"line {lineno}: node ids must be integers") from None
        for col, v in ((0, src), (1, dst)):
            if not 0 <= v < n:
                raise InputError(f"line {lineno}, column {col}: node id {v} outside [0, {n})")
        adj[src, dst] = 1
    return adj


def save_network(net: Network, path: str | Path, format: str = "dense_csv") -> None:
    path = Path(path)
    if format == "dense_csv":
        body = "\n".join(",".join(str(int(v)) for v in row) for row in net.adjacency)
        path.write_text(body + "\n")
    elif format == "edge_list_tsv":
        lines = [f"N={net.n_nodes}"]
        lines += [f"{p}\t{q}" for p, q in np.argwhere(net.adjacency == 1)]
        path.write_text("\n".join(lines) + "\n")
    else:
        raise ValueError(f"unknown network format {format!r}")


def save_masks(masks: Sequence[PairMask], path: str | Path) -> None:
    """Write folds as a JSON list of lists of [p, q] pairs."""
    payload = [m.held_out.tolist() for m in masks]
    Path(path).write_text(json.dumps(payload))


def load_masks(path: str | Path) -> list[PairMask]:
    payload = json.loads(Path(path).read_text())
    return [PairMask(np.asarray(pairs, dtype=np.int64).reshape(-1, 2), fold_id=i)
            for i, pairs in enumerate(payload)]


def check_partition(masks: Iterable[PairMask], net: Network) -> bool:
    """True when ``masks`` are disjoint and cover every valid pair."""
    seen: set[tuple[int, int]] = set()
    for m in masks:
        pairs = m.pairs()
        if len(pairs) != len(m) or seen & pairs:
            return False
        seen |= pairs
    p, q = net.valid_pairs()
    return seen == set(zip(p.tolist(), q.tolist()))
