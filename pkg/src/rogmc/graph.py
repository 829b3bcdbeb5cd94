"""Interest graph and rating-level subgraphs as normalized bipartite adjacencies.

Nodes share one index space: users ``0..num_users-1`` followed by items
offset by ``num_users``. Every graph spans all nodes; nodes without edges
simply have empty rows.
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import cached_property
from pathlib import Path
from typing import Sequence

import numpy as np
import scipy.sparse as sp

from .dataset import UNKNOWN, Dataset

MODES = ("cumulative", "exact", "reverse_cumulative", "none")


class GraphError(ValueError):
    pass


@dataclass(frozen=True, eq=False)
class SparseBipartiteGraph:
    """CSR-style symmetric adjacency with per-edge ``1/sqrt(deg(i) deg(j))`` weights."""

    num_users: int
    num_items: int
    row_offsets: np.ndarray
    neighbor_ids: np.ndarray
    edge_norm: np.ndarray

    @property
    def num_nodes(self) -> int:
        return self.num_users + self.num_items

    @property
    def num_edges(self) -> int:
        """Undirected edge count."""
        return len(self.neighbor_ids) // 2

    def degrees(self) -> np.ndarray:
        return np.diff(self.row_offsets)

    def edge_pairs(self) -> set[tuple[int, int]]:
        """Undirected edges as ``(user, item)`` pairs with the item in its own 0-based index."""
        src = np.repeat(np.arange(self.num_nodes), self.degrees())
        mask = src < self.num_users
        return set(zip(src[mask].tolist(), (self.neighbor_ids[mask] - self.num_users).tolist()))

    @cached_property
    def adjacency(self) -> sp.csr_matrix:
        n = self.num_nodes
        return sp.csr_matrix((self.edge_norm, self.neighbor_ids, self.row_offsets), shape=(n, n))

    def to_dense(self) -> np.ndarray:
        return self.adjacency.toarray()

    def export_tsv(self, path) -> None:
        src = np.repeat(np.arange(self.num_nodes), self.degrees())
        with Path(path).open("w", encoding="utf-8", newline="\n") as fh:
            fh.write("src\tdst\tnorm\n")
            for s, d, w in zip(src.tolist(), self.neighbor_ids.tolist(), self.edge_norm.tolist()):
                fh.write(f"{s}\t{d}\t{w!r}\n")


def from_pairs(num_users: int, num_items: int, users: np.ndarray,
               items: np.ndarray) -> SparseBipartiteGraph:
    users = np.asarray(users, dtype=np.int64)
    items = np.asarray(items, dtype=np.int64)
    n = num_users + num_items
    src = np.concatenate([users, items + num_users])
    dst = np.concatenate([items + num_users, users])
    order = np.lexsort((dst, src))
    src, dst = src[order], dst[order]
    if len(src) > 1 and np.any((src[1:] == src[:-1]) & (dst[1:] == dst[:-1])):
        raise GraphError("duplicate edge")
    offsets = np.zeros(n + 1, dtype=np.int64)
    np.cumsum(np.bincount(src, minlength=n), out=offsets[1:])
    graph = SparseBipartiteGraph(num_users, num_items, offsets, dst, np.empty(len(dst)))
    return compute_norms(graph)


def compute_norms(graph: SparseBipartiteGraph) -> SparseBipartiteGraph:
    """Return a copy of ``graph`` with symmetric sqrt-degree edge weights."""
    deg = graph.degrees().astype(np.float64)
    src = np.repeat(np.arange(graph.num_nodes), graph.degrees())
    norm = 1.0 / np.sqrt(deg[src] * deg[graph.neighbor_ids])
    return SparseBipartiteGraph(graph.num_users, graph.num_items, graph.row_offsets,
                                graph.neighbor_ids, norm)


def build_interest_graph(train: Dataset) -> SparseBipartiteGraph:
    """One edge per training interaction, rated or not."""
    if len(train) == 0:
        raise GraphError("cannot build a graph from an empty training set")
    return from_pairs(train.num_users, train.num_items, train.users, train.items)


@dataclass(frozen=True, eq=False)
class DecomposedGraphs:
    interest: SparseBipartiteGraph
    levels: dict[int, SparseBipartiteGraph]
    T: tuple[int, ...]
    mode: str

    @property
    def num_nodes(self) -> int:
        return self.interest.num_nodes


def _check_levels(train: Dataset, T) -> tuple[int, ...]:
    T = tuple(sorted(int(t) for t in (train.rating_set if T is None else T)))
    if not T:
        raise GraphError("T must contain at least one rating value")
    bad = [t for t in T if t not in train.rating_set]
    if bad:
        raise GraphError(f"levels {bad} are not in the rating set {train.rating_set}")
    if len(set(T)) != len(T):
        raise GraphError(f"duplicate levels in {T}")
    return T


def _build(train: Dataset, T, mode: str, keep) -> DecomposedGraphs:
    T = _check_levels(train, T)
    interest = build_interest_graph(train)
    known = train.labels != UNKNOWN
    levels = {}
    for t in T:
        mask = known & keep(train.labels, t)
        levels[t] = from_pairs(train.num_users, train.num_items, train.users[mask], train.items[mask])
    return DecomposedGraphs(interest, levels, T, mode)


def build_cumulative(train: Dataset, T: Sequence[int] | None = None) -> DecomposedGraphs:
    """Level ``t`` holds every rated edge with rating >= t."""
    return _build(train, T, "cumulative", lambda r, t: r >= t)


def build_exact(train: Dataset, T: Sequence[int] | None = None) -> DecomposedGraphs:
    return _build(train, T, "exact", lambda r, t: r == t)


def build_reverse_cumulative(train: Dataset, T: Sequence[int] | None = None) -> DecomposedGraphs:
    return _build(train, T, "reverse_cumulative", lambda r, t: r <= t)


def build_single(train: Dataset) -> DecomposedGraphs:
    """No decomposition: one level that is the interest graph itself."""
    interest = build_interest_graph(train)
    t = train.rating_set[0]
    return DecomposedGraphs(interest, {t: interest}, (t,), "none")


def build_decomposed(train: Dataset, mode: str = "cumulative",
                     T: Sequence[int] | None = None) -> DecomposedGraphs:
    if mode == "cumulative":
        return build_cumulative(train, T)
    if mode == "exact":
        return build_exact(train, T)
    if mode == "reverse_cumulative":
        return build_reverse_cumulative(train, T)
    if mode == "none":
        return build_single(train)
    raise GraphError(f"unknown decomposition mode {mode!r}; expected one of {MODES}")
