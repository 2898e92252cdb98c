"""Query-item bipartite graph, item-session hypergraph and their normalized operators."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterable, Literal

import numpy as np

from .linalg import SparseMatrix


class GraphInputError(ValueError):
    """Malformed or out-of-range graph input."""


@dataclass(frozen=True, eq=False)
class BipartiteGraph:
    """Simple undirected query-item graph.

    Node ids are unified: queries occupy ``[0, num_queries)`` and items
    ``[num_queries, num_queries + num_items)``. ``edges`` is an ``(E, 2)``
    array of ``(query_index, item_index)`` in local (per-side) indices.
    """

    num_queries: int
    num_items: int
    edges: np.ndarray

    def __post_init__(self):
        e = np.asarray(self.edges, dtype=np.int64).reshape(-1, 2)
        if len(e):
            if e[:, 0].min() < 0 or e[:, 0].max() >= self.num_queries:
                raise GraphInputError("query index out of range")
            if e[:, 1].min() < 0 or e[:, 1].max() >= self.num_items:
                raise GraphInputError("item index out of range")
            keys = e[:, 0] * self.num_items + e[:, 1]
            if len(np.unique(keys)) != len(keys):
                raise GraphInputError("duplicate edge")
        e.setflags(write=False)
        object.__setattr__(self, "edges", e)

    @classmethod
    def from_pairs(cls, num_queries: int, num_items: int, pairs: Iterable) -> "BipartiteGraph":
        return cls(num_queries, num_items, np.asarray(list(pairs), dtype=np.int64).reshape(-1, 2))

    @property
    def num_nodes(self) -> int:
        return self.num_queries + self.num_items

    @property
    def num_edges(self) -> int:
        return len(self.edges)

    def with_edges(self, edges) -> "BipartiteGraph":
        return BipartiteGraph(self.num_queries, self.num_items, edges)

    def edge_keys(self) -> np.ndarray:
        return self.edges[:, 0] * self.num_items + self.edges[:, 1]

    def adjacency(self) -> SparseMatrix:
        """Symmetric N x N adjacency over unified node ids."""
        q = self.edges[:, 0]
        i = self.edges[:, 1] + self.num_queries
        r = np.concatenate([q, i])
        c = np.concatenate([i, q])
        return SparseMatrix.from_coo(self.num_nodes, self.num_nodes, r, c)

    def query_degrees(self) -> np.ndarray:
        return np.bincount(self.edges[:, 0], minlength=self.num_queries)

    def item_degrees(self) -> np.ndarray:
        return np.bincount(self.edges[:, 1], minlength=self.num_items)

    def node_degrees(self) -> np.ndarray:
        return np.concatenate([self.query_degrees(), self.item_degrees()])

    def density(self) -> float:
        n = self.num_nodes
        return 0.0 if n < 2 else 2.0 * self.num_edges / (n * (n - 1))


@dataclass(frozen=True, eq=False)
class Hypergraph:
    """Items joined by session hyperedges.

    ``hyperedges`` holds sorted unique item tuples, each of size >= 2.
    ``weights`` is one entry per hyperedge (all 1.0 unless given).
    """

    num_items: int
    hyperedges: tuple[tuple[int, ...], ...]
    weights: np.ndarray = field(default=None)

    def __post_init__(self):
        for e in self.hyperedges:
            if len(e) < 2:
                raise GraphInputError("hyperedges need at least two items")
            if len(set(e)) != len(e):
                raise GraphInputError("duplicate item inside a hyperedge")
            if min(e) < 0 or max(e) >= self.num_items:
                raise GraphInputError("item index out of range")
        w = np.ones(len(self.hyperedges)) if self.weights is None else np.asarray(self.weights, dtype=np.float64)
        if w.shape != (len(self.hyperedges),):
            raise GraphInputError("one weight per hyperedge required")
        w.setflags(write=False)
        object.__setattr__(self, "weights", w)

    @property
    def num_hyperedges(self) -> int:
        return len(self.hyperedges)

    def incidence(self) -> SparseMatrix:
        """Binary N_I x M incidence matrix."""
        rows, cols = self._coords()
        return SparseMatrix.from_coo(self.num_items, self.num_hyperedges, rows, cols)

    def _coords(self):
        sizes = np.fromiter((len(e) for e in self.hyperedges), dtype=np.int64, count=self.num_hyperedges)
        rows = np.fromiter((i for e in self.hyperedges for i in e), dtype=np.int64, count=int(sizes.sum()))
        cols = np.repeat(np.arange(self.num_hyperedges), sizes)
        return rows, cols

    def node_degrees(self) -> np.ndarray:
        """D_ii: number of hyperedges containing each item."""
        rows, _ = self._coords()
        return np.bincount(rows, minlength=self.num_items)

    def edge_degrees(self) -> np.ndarray:
        """B_ee: number of items in each hyperedge."""
        return np.fromiter((len(e) for e in self.hyperedges), dtype=np.int64, count=self.num_hyperedges)

    def item_degrees(self) -> np.ndarray:
        return self.node_degrees()


def build_hypergraph(records: Iterable[Iterable[int]], num_items: int) -> Hypergraph:
    """One hyperedge per record, items deduplicated; records left with < 2 items are dropped.

    Identical records stay as separate hyperedges.
    """
    edges = []
    for rec in records:
        items = sorted({int(i) for i in rec})
        if items and (items[0] < 0 or items[-1] >= num_items):
            raise GraphInputError(f"item index out of range in record {list(rec)!r}")
        if len(items) >= 2:
            edges.append(tuple(items))
    return Hypergraph(num_items, tuple(edges))


@dataclass(frozen=True)
class PropagationOperator:
    normalized: SparseMatrix
    kind: Literal["bipartite", "hypergraph"]

    @property
    def size(self) -> int:
        return self.normalized.rows


def bipartite_operator(g: BipartiteGraph) -> PropagationOperator:
    """D^-1/2 (A + I) D^-1/2 over the unified node space."""
    n = g.num_nodes
    q = g.edges[:, 0]
    i = g.edges[:, 1] + g.num_queries
    deg = g.node_degrees().astype(np.float64) + 1.0
    inv_sqrt = 1.0 / np.sqrt(deg)
    diag = np.arange(n)
    r = np.concatenate([q, i, diag])
    c = np.concatenate([i, q, diag])
    v = inv_sqrt[r] * inv_sqrt[c]
    return PropagationOperator(SparseMatrix.from_coo(n, n, r, c, v), "bipartite")


def hypergraph_operator(h: Hypergraph) -> PropagationOperator:
    """D^-1/2 H W B^-1 H^T D^-1/2; items in no hyperedge get zero rows and columns."""
    H = h.incidence().to_scipy()
    dv = h.node_degrees().astype(np.float64)
    de = h.edge_degrees().astype(np.float64)
    dv_inv_sqrt = np.zeros_like(dv)
    nz = dv > 0
    dv_inv_sqrt[nz] = 1.0 / np.sqrt(dv[nz])
    left = H.multiply(dv_inv_sqrt[:, None]).tocsr()
    scaled = left.multiply((h.weights / de)[None, :]).tocsr() if h.num_hyperedges else left
    op = scaled @ left.T
    return PropagationOperator(SparseMatrix.from_scipy(op), "hypergraph")


def degree_vector(g: BipartiteGraph | Hypergraph, side: Literal["query", "item", "node"] = "node") -> np.ndarray:
    if isinstance(g, Hypergraph):
        if side == "query":
            raise GraphInputError("a hypergraph has no query nodes")
        return g.node_degrees()
    if side == "query":
        return g.query_degrees()
    if side == "item":
        return g.item_degrees()
    if side == "node":
        return g.node_degrees()
    raise GraphInputError(f"unknown side {side!r}")
