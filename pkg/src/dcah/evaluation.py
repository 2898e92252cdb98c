"""Evaluation protocol (four-part split, negatives, ranking metrics) and graph diagnostics."""
from __future__ import annotations

import json
import logging
import math
import warnings
from dataclasses import dataclass, field

import numpy as np

from .graph import BipartiteGraph, Hypergraph

log = logging.getLogger(__name__)

PARTS: tuple[str, ...] = ("head", "tail1", "tail2", "isolation")
NEGATIVES_PER_SIDE = 50


class ProtocolError(RuntimeError):
    """The evaluation protocol cannot be carried out on this input."""


# --------------------------------------------------------------------------
# splitting
# --------------------------------------------------------------------------


def degree_tiers(degrees: np.ndarray) -> np.ndarray:
    """0 = top 20%, 1 = next 40% (20-60%), 2 = bottom 40%.

    Nodes are ranked by degree descending; equal degrees are ordered by id.
    """
    n = len(degrees)
    order = np.lexsort((np.arange(n), -np.asarray(degrees)))
    pos = np.empty(n, dtype=np.int64)
    pos[order] = np.arange(n)
    c20 = int(math.floor(0.2 * n + 0.5))
    c60 = int(math.floor(0.6 * n + 0.5))
    return np.where(pos < c20, 0, np.where(pos < c60, 1, 2))


def assign_parts(bip_degrees: np.ndarray, hyp_degrees: np.ndarray) -> np.ndarray:
    """Part label per item: 0..3 for head/tail1/tail2/isolation, -1 for excluded."""
    tb, th = degree_tiers(bip_degrees), degree_tiers(hyp_degrees)
    part = np.full(len(tb), -1, dtype=np.int64)
    part[(tb == 0) & (th == 0)] = 0
    part[(tb == 0) & (th == 1)] = 1
    part[(th == 0) & (tb == 1)] = 2
    part[(tb == 2) & (th == 2)] = 3
    return part


def _round(x: float) -> int:
    return int(math.floor(x + 0.5))


@dataclass
class EvalProtocol:
    """Edges grouped by split and part, plus fixed negatives for val/test edges.

    Edge arrays are ``(E, 2)`` of ``(query, item)``; negatives are
    ``(E, 100, 2)`` with the 50 query-corrupted pairs first.
    ``test_full`` keeps each part's test edges before part balancing;
    ``held_out`` holds the test edges dropped by balancing and ``excluded``
    the edges of items that fall in no part; neither is trained on unless the
    split was made with ``train_on_excluded``.
    """

    num_queries: int
    num_items: int
    item_part: np.ndarray
    train: np.ndarray
    val: dict[str, np.ndarray]
    test: dict[str, np.ndarray]
    test_full: dict[str, np.ndarray]
    train_by_part: dict[str, np.ndarray]
    held_out: np.ndarray
    excluded: np.ndarray = field(default_factory=lambda: np.zeros((0, 2), dtype=np.int64))
    val_negatives: dict[str, np.ndarray] = field(default_factory=dict)
    test_negatives: dict[str, np.ndarray] = field(default_factory=dict)

    def train_graph(self) -> BipartiteGraph:
        return BipartiteGraph(self.num_queries, self.num_items, self.train)

    def all_val(self) -> tuple[np.ndarray, np.ndarray]:
        edges = np.concatenate([self.val[p] for p in PARTS])
        negs = np.concatenate([self.val_negatives[p] for p in PARTS])
        return edges, negs

    def to_dict(self) -> dict:
        def lst(a):
            return np.asarray(a).tolist()

        return {
            "num_queries": self.num_queries,
            "num_items": self.num_items,
            "item_part": lst(self.item_part),
            "train": lst(self.train),
            "held_out": lst(self.held_out),
            "excluded": lst(self.excluded),
            **{key: {p: lst(getattr(self, key)[p]) for p in PARTS}
               for key in ("val", "test", "test_full", "train_by_part", "val_negatives", "test_negatives")},
        }

    @classmethod
    def from_dict(cls, d: dict) -> "EvalProtocol":
        def e(a):
            return np.asarray(a, dtype=np.int64).reshape(-1, 2)

        def n(a):
            return np.asarray(a, dtype=np.int64).reshape(-1, 2 * NEGATIVES_PER_SIDE, 2)

        return cls(
            num_queries=d["num_queries"],
            num_items=d["num_items"],
            item_part=np.asarray(d["item_part"], dtype=np.int64),
            train=e(d["train"]),
            held_out=e(d["held_out"]),
            excluded=e(d.get("excluded", [])),
            val={p: e(d["val"][p]) for p in PARTS},
            test={p: e(d["test"][p]) for p in PARTS},
            test_full={p: e(d["test_full"][p]) for p in PARTS},
            train_by_part={p: e(d["train_by_part"][p]) for p in PARTS},
            val_negatives={p: n(d["val_negatives"][p]) for p in PARTS},
            test_negatives={p: n(d["test_negatives"][p]) for p in PARTS},
        )

    def save(self, path) -> None:
        with open(path, "w") as fh:
            json.dump(self.to_dict(), fh, sort_keys=True, separators=(",", ":"))

    @classmethod
    def load(cls, path) -> "EvalProtocol":
        with open(path) as fh:
            return cls.from_dict(json.load(fh))


def split_four_parts(g_b: BipartiteGraph, g_h: Hypergraph, rng: np.random.Generator,
                     with_negatives: bool = True, train_on_excluded: bool = False) -> EvalProtocol:
    """Degree-stratified 70/10/20 split with test parts balanced to 25% each.

    Items are tiered by degree in both graphs; an edge belongs to the part of
    its item. Edges of excluded items are set aside, or added to training
    when ``train_on_excluded`` is set.
    """
    if g_b.num_items != g_h.num_items:
        raise ProtocolError("bipartite graph and hypergraph disagree on the item count")
    part = assign_parts(g_b.item_degrees(), g_h.node_degrees())
    edge_part = part[g_b.edges[:, 1]] if g_b.num_edges else np.zeros(0, dtype=np.int64)

    excluded = g_b.edges[edge_part == -1]
    train_chunks = [excluded] if train_on_excluded else []
    val, test_full, train_by_part = {}, {}, {}
    for k, name in enumerate(PARTS):
        edges = g_b.edges[edge_part == k]
        if len(edges) == 0:
            warnings.warn(f"part {name!r} has no edges", stacklevel=2)
        edges = edges[rng.permutation(len(edges))]
        n_test, n_val = _round(0.2 * len(edges)), _round(0.1 * len(edges))
        test_full[name] = edges[:n_test]
        val[name] = edges[n_test:n_test + n_val]
        train_by_part[name] = edges[n_test + n_val:]
        train_chunks.append(train_by_part[name])

    sizes = [len(test_full[p]) for p in PARTS if len(test_full[p])]
    m = min(sizes) if sizes else 0
    test, held = {}, []
    for name in PARTS:
        t = test_full[name]
        if len(t) > m:
            keep = np.sort(rng.choice(len(t), size=m, replace=False))
            mask = np.zeros(len(t), dtype=bool)
            mask[keep] = True
            test[name], dropped = t[mask], t[~mask]
            held.append(dropped)
        else:
            test[name] = t
    train = np.concatenate(train_chunks) if train_chunks else np.zeros((0, 2), dtype=np.int64)
    train = train[np.lexsort((train[:, 1], train[:, 0]))]
    proto = EvalProtocol(
        num_queries=g_b.num_queries,
        num_items=g_b.num_items,
        item_part=part,
        train=train,
        val=val,
        test=test,
        test_full=test_full,
        train_by_part=train_by_part,
        held_out=np.concatenate(held) if held else np.zeros((0, 2), dtype=np.int64),
        excluded=np.zeros((0, 2), dtype=np.int64) if train_on_excluded else excluded,
    )
    if with_negatives:
        emitted: set[int] = set()
        for name in PARTS:
            proto.test_negatives[name] = sample_negatives(g_b, test[name], rng, emitted)
        for name in PARTS:
            proto.val_negatives[name] = sample_negatives(g_b, val[name], rng, emitted)
    return proto


def sample_negatives(g_b: BipartiteGraph, edges: np.ndarray, rng: np.random.Generator,
                     emitted: set[int] | None = None, per_side: int = NEGATIVES_PER_SIDE) -> np.ndarray:
    """For each positive, ``per_side`` query corruptions then ``per_side`` item corruptions.

    Candidates are uniform over ids, never an edge of ``g_b``, and never a pair
    already in ``emitted`` (which is updated in place).
    """
    emitted = set() if emitted is None else emitted
    edges = np.asarray(edges, dtype=np.int64).reshape(-1, 2)
    nq, ni = g_b.num_queries, g_b.num_items
    existing = set(g_b.edge_keys().tolist())
    out = np.empty((len(edges), 2 * per_side, 2), dtype=np.int64)
    for r, (q, i) in enumerate(edges):
        qs = _draw(nq, per_side, lambda c: c * ni + i, existing, emitted, rng, f"query-corrupt of ({q}, {i})")
        its = _draw(ni, per_side, lambda c: q * ni + c, existing, emitted, rng, f"item-corrupt of ({q}, {i})")
        out[r, :per_side, 0] = qs
        out[r, :per_side, 1] = i
        out[r, per_side:, 0] = q
        out[r, per_side:, 1] = its
    return out


def _draw(n: int, k: int, key, existing: set, emitted: set, rng, what: str) -> np.ndarray:
    picked: list[int] = []
    for _ in range(8):
        for c in rng.integers(0, n, size=2 * k + 8).tolist():
            kc = key(c)
            if kc in existing or kc in emitted:
                continue
            emitted.add(kc)
            picked.append(c)
            if len(picked) == k:
                return np.asarray(picked)
    # dense neighbourhood: enumerate what is left
    left = [c for c in range(n) if key(c) not in existing and key(c) not in emitted]
    need = k - len(picked)
    if len(left) < need:
        raise ProtocolError(f"only {len(left)} valid negatives left for {what}, need {need}")
    for c in rng.choice(left, size=need, replace=False).tolist():
        emitted.add(key(c))
        picked.append(c)
    return np.asarray(picked)


# --------------------------------------------------------------------------
# ranking metrics
# --------------------------------------------------------------------------


def reciprocal_ranks(pos_scores, neg_scores) -> np.ndarray:
    """Average-tie rank of each positive among its own negatives, inverted."""
    pos = np.asarray(pos_scores, dtype=np.float64).reshape(-1)
    neg = np.asarray(neg_scores, dtype=np.float64).reshape(len(pos), -1)
    higher = (neg > pos[:, None]).sum(axis=1)
    ties = (neg == pos[:, None]).sum(axis=1)
    return 1.0 / (1.0 + higher + 0.5 * ties)


def mrr(pos_scores, neg_scores) -> float:
    pos = np.asarray(pos_scores).reshape(-1)
    if len(pos) == 0:
        raise ProtocolError("MRR of an empty test set is undefined")
    return float(reciprocal_ranks(pos, neg_scores).mean())


def recall_at_n(pos_scores, neg_scores) -> float:
    """Share of positives in the top-N of the pooled candidates, N = #positives.

    Ties straddling the cut are shared pro rata, which is the expectation
    under a random tie-break.
    """
    pos = np.asarray(pos_scores, dtype=np.float64).reshape(-1)
    neg = np.asarray(neg_scores, dtype=np.float64).reshape(-1)
    n = len(pos)
    if n == 0:
        raise ProtocolError("Recall@N of an empty part is undefined")
    pool = np.concatenate([pos, neg])
    t = np.sort(pool)[::-1][n - 1]
    above_pos = int((pos > t).sum())
    above = int((pool > t).sum())
    tie_pos = int((pos == t).sum())
    tie = int((pool == t).sum())
    return (above_pos + (n - above) * tie_pos / tie) / n


def evaluate_embeddings(queries: np.ndarray, items: np.ndarray, edges: dict[str, np.ndarray],
                        negatives: dict[str, np.ndarray]) -> dict[str, dict[str, float]]:
    """Per-part MRR and Recall@N for dot-product scores."""
    res = {}
    for p in PARTS:
        e, n = edges[p], negatives[p]
        if len(e) == 0:
            res[p] = {"mrr": float("nan"), "recall": float("nan")}
            continue
        pos = np.einsum("ij,ij->i", queries[e[:, 0]], items[e[:, 1]])
        neg = np.einsum("rkj,rkj->rk", queries[n[..., 0]], items[n[..., 1]])
        res[p] = {"mrr": mrr(pos, neg), "recall": recall_at_n(pos, neg)}
    return res


# --------------------------------------------------------------------------
# graph diagnostics
# --------------------------------------------------------------------------


def _undirected(g) -> tuple[np.ndarray, np.ndarray, int]:
    """(u, v, num_nodes) in a single id space for a bipartite graph or a raw edge list."""
    if isinstance(g, BipartiteGraph):
        return g.edges[:, 0], g.edges[:, 1] + g.num_queries, g.num_nodes
    e = np.asarray(g, dtype=np.int64).reshape(-1, 2)
    return e[:, 0], e[:, 1], int(e.max()) + 1 if len(e) else 0


def degree_assortativity(g) -> float:
    """Pearson correlation of endpoint degrees over both orientations of every edge.

    Returns NaN (with a warning) when the degrees have no variance.
    """
    u, v, n = _undirected(g)
    if len(u) < 2:
        warnings.warn("assortativity needs at least two edges", stacklevel=2)
        return float("nan")
    deg = np.bincount(np.concatenate([u, v]), minlength=n).astype(np.float64)
    x = np.concatenate([deg[u], deg[v]])
    y = np.concatenate([deg[v], deg[u]])
    xc, yc = x - x.mean(), y - y.mean()
    den = math.sqrt((xc * xc).sum() * (yc * yc).sum())
    if den == 0.0:
        warnings.warn("assortativity undefined: endpoint degrees have zero variance", stacklevel=2)
        return float("nan")
    return float((xc * yc).sum() / den)


def relative_degree(g) -> tuple[np.ndarray, float]:
    """deg(v) / mean neighbour degree, per node (NaN when isolated) and averaged."""
    u, v, n = _undirected(g)
    deg = np.bincount(np.concatenate([u, v]), minlength=n).astype(np.float64)
    nbr_sum = np.bincount(u, weights=deg[v], minlength=n) + np.bincount(v, weights=deg[u], minlength=n)
    rel = np.full(n, np.nan)
    has = deg > 0
    rel[has] = deg[has] / (nbr_sum[has] / deg[has])
    return rel, float(rel[has].mean()) if has.any() else float("nan")


def mad(embeddings: np.ndarray) -> float:
    """Mean over distinct row pairs of (1 - cosine) / 2.

    Zero-norm rows are dropped with a warning. The all-pairs mean is taken
    in closed form from the sum of unit rows, so every pair counts at any size.
    """
    x = np.asarray(embeddings, dtype=np.float64)
    norms = np.linalg.norm(x, axis=1)
    keep = norms > 0
    if not keep.all():
        warnings.warn(f"MAD: excluding {int((~keep).sum())} zero-norm rows", stacklevel=2)
    u = x[keep] / norms[keep, None]
    n = len(u)
    if n < 2:
        return float("nan")
    s = u.sum(axis=0)
    # sum over i != j of cos = |sum|^2 - sum |u_i|^2
    mean_cos = (float(s @ s) - float((u * u).sum())) / (n * (n - 1))
    return float(min(1.0, max(0.0, (1.0 - mean_cos) / 2.0)))


def degree_histogram(g, log_bins: bool = False, num_bins: int = 20) -> list[tuple[float, float]]:
    """Sorted (degree, count) pairs; with ``log_bins`` (bin centre, count per unit degree) over degrees >= 1."""
    if isinstance(g, (BipartiteGraph, Hypergraph)):
        deg = g.node_degrees()
    else:
        deg = np.asarray(g, dtype=np.int64)
    if not log_bins:
        vals, counts = np.unique(deg, return_counts=True)
        return [(int(a), int(b)) for a, b in zip(vals, counts)]
    pos = deg[deg > 0]
    if len(pos) == 0:
        return []
    edges = np.unique(np.floor(np.logspace(0, np.log10(pos.max() + 1), num_bins + 1)))
    if len(edges) < 2:
        edges = np.array([1.0, pos.max() + 1.0])
    counts, _ = np.histogram(pos, bins=edges)
    widths = np.diff(edges)
    centres = np.sqrt(edges[:-1] * edges[1:])
    return [(float(c), float(k / w)) for c, k, w in zip(centres, counts, widths) if k > 0]


def tail_exponent_mle(degrees, x_min: int) -> float:
    """Discrete power-law exponent by the continuous approximation with a half-unit shift."""
    x = np.asarray(degrees, dtype=np.float64)
    x = x[x >= x_min]
    if len(x) == 0:
        raise ValueError("no observations at or above x_min")
    return float(1.0 + len(x) / np.log(x / (x_min - 0.5)).sum())


# --------------------------------------------------------------------------
# reports
# --------------------------------------------------------------------------


def aggregate_runs(runs: list[dict[str, dict[str, float]]]) -> dict[str, dict[str, dict[str, float]]]:
    """mean/std (population) per part and metric across runs."""
    out = {}
    for p in PARTS:
        out[p] = {}
        for metric in ("mrr", "recall"):
            vals = np.array([r[p][metric] for r in runs], dtype=np.float64)
            out[p][metric] = {"mean": float(vals.mean()), "std": float(vals.std())}
    return out


def format_table(rows: dict[str, dict], title: str = "") -> str:
    """Aligned text table: one row per method, MRR and Recall@N (as %) per part."""
    head = f"{'Model':<28}" + "".join(f"{p + ' MRR':>16}{p + ' R@N':>16}" for p in PARTS)
    lines = [title] if title else []
    lines += [head, "-" * len(head)]
    for name, agg in rows.items():
        cells = []
        for p in PARTS:
            for metric in ("mrr", "recall"):
                m = agg[p][metric]
                cells.append(f"{100 * m['mean']:>9.2f}±{100 * m['std']:<6.2f}")
        lines.append(f"{name:<28}" + "".join(cells))
    return "\n".join(lines) + "\n"
