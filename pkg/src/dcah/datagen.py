"""Synthetic query-item graphs with topic-coherent sessions, plus the text file formats."""
from __future__ import annotations

import json
import zlib
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from .graph import BipartiteGraph, GraphInputError, Hypergraph, build_hypergraph


class ParseError(GraphInputError):
    """A data file line could not be parsed."""


@dataclass(frozen=True)
class GenSpec:
    num_queries: int = 5000
    num_items: int = 5000
    num_edges: int = 25000
    gamma: float = 2.1              # item popularity exponent
    query_gamma: float = 2.5        # query activity exponent
    alpha: float = -0.3             # < 0 disassortative, > 0 assortative
    num_sessions: int = 2000
    session_min: int = 2
    session_geom_p: float = 0.12    # size = session_min - 1 + Geometric(p), mean about 9.3
    num_topics: int = 50
    topic_coherence: float = 0.8    # share of session slots drawn from the session topic
    query_topic_coherence: float = 0.8  # share of a query's items drawn from its topic
    tokens_per_query: tuple[int, int] = (2, 5)
    topic_vocab: int = 6
    generic_vocab: int = 200
    seed: int = 0

    def __post_init__(self):
        if self.num_queries <= 0 or self.num_items <= 0 or self.num_edges <= 0:
            raise GraphInputError("counts must be positive")
        if self.num_edges > self.num_queries * self.num_items:
            raise GraphInputError("more edges requested than query-item pairs exist")
        if not -1.0 <= self.alpha <= 1.0:
            raise GraphInputError("alpha must lie in [-1, 1]")
        for name in ("topic_coherence", "query_topic_coherence"):
            if not 0.0 <= getattr(self, name) <= 1.0:
                raise GraphInputError(f"{name} must lie in [0, 1]")
        if self.session_min < 2:
            raise GraphInputError("sessions need at least two items")
        if not 0.0 < self.session_geom_p <= 1.0:
            raise GraphInputError("session_geom_p must lie in (0, 1]")
        if self.num_topics < 1 or self.num_topics > self.num_items:
            raise GraphInputError("num_topics must lie in [1, num_items]")
        if self.gamma <= 1.0 or self.query_gamma <= 1.0:
            raise GraphInputError("power-law exponents must exceed 1")

    @classmethod
    def from_dict(cls, d: dict) -> "GenSpec":
        d = dict(d)
        if "tokens_per_query" in d:
            d["tokens_per_query"] = tuple(d["tokens_per_query"])
        return cls(**d)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["tokens_per_query"] = list(self.tokens_per_query)
        return d


@dataclass
class Dataset:
    bipartite: BipartiteGraph
    hypergraph: Hypergraph
    query_tokens: list[list[str]] | None = None
    item_topics: np.ndarray | None = None
    query_topics: np.ndarray | None = None
    spec: GenSpec | None = None


def _pareto(rng: np.random.Generator, n: int, gamma: float) -> np.ndarray:
    """Continuous power law on [1, inf) with density exponent ``gamma``."""
    return (1.0 - rng.random(n)) ** (-1.0 / (gamma - 1.0))


def _streams(spec: GenSpec) -> dict[str, np.random.Generator]:
    names = ("topics", "bipartite", "sessions", "tokens")
    return dict(zip(names, (np.random.default_rng(s) for s in np.random.SeedSequence(spec.seed).spawn(len(names)))))


def item_topics(spec: GenSpec) -> np.ndarray:
    rng = _streams(spec)["topics"]
    return rng.integers(0, spec.num_topics, size=spec.num_items)


def generate_bipartite(spec: GenSpec) -> tuple[BipartiteGraph, np.ndarray]:
    """Power-law bipartite graph; returns the graph and each query's topic.

    Item popularity ``w`` is power-law distributed. A query picks its items
    with probability proportional to ``w ** e_q``; ``e_q`` tilts low-activity
    queries toward popular items when ``alpha < 0`` (and away when > 0).
    Queries are assigned topics in proportion to topic popularity so item
    degrees stay proportional to ``w``.
    """
    rng = _streams(spec)["bipartite"]
    topics = item_topics(spec)
    nq, ni, E = spec.num_queries, spec.num_items, spec.num_edges
    w = _pareto(rng, ni, spec.gamma)
    topic_weight = np.bincount(topics, weights=w, minlength=spec.num_topics)
    qtopic = rng.choice(spec.num_topics, size=nq, p=topic_weight / topic_weight.sum())

    # query degrees: at least one edge each when possible, power-law remainder
    act = _pareto(rng, nq, spec.query_gamma)
    base = 1 if E >= nq else 0
    k = base + rng.multinomial(E - base * nq, act / act.sum())
    k = np.minimum(k, max(1, ni // 2))

    # activity percentile in [0, 1]; exponent tilt per quantized bin
    rank = np.empty(nq)
    rank[np.lexsort((np.arange(nq), k))] = np.arange(nq) / max(nq - 1, 1)
    bins = np.round(rank * 20).astype(int)
    expo_by_bin = {b: 1.0 - spec.alpha * (1.0 - 2.0 * b / 20.0) for b in range(21)}

    members = [np.flatnonzero(topics == t) for t in range(spec.num_topics)]
    logw = np.log(w)
    cache: dict[tuple[int, int], np.ndarray] = {}

    def probs(pool_key: int, b: int, pool: np.ndarray) -> np.ndarray:
        key = (pool_key, b)
        if key not in cache:
            lw = logw[pool] * expo_by_bin[b]
            p = np.exp(lw - lw.max())
            cache[key] = p / p.sum()
        return cache[key]

    all_items = np.arange(ni)
    chosen_rows = []
    for q in range(nq):
        kq = int(k[q])
        if kq == 0:
            continue
        pool = members[qtopic[q]]
        n_in = min(int(rng.binomial(kq, spec.query_topic_coherence)), len(pool))
        picks = rng.choice(pool, size=n_in, replace=False, p=probs(qtopic[q], bins[q], pool)) if n_in else np.zeros(0, int)
        n_out = kq - n_in
        if n_out:
            cand = rng.choice(all_items, size=min(ni, n_out + n_in), replace=False,
                              p=probs(-1, bins[q], all_items))
            cand = cand[~np.isin(cand, picks)][:n_out]
            picks = np.concatenate([picks, cand])
        chosen_rows.append(np.column_stack([np.full(len(picks), q), picks]))
    edges = np.concatenate(chosen_rows) if chosen_rows else np.zeros((0, 2), dtype=np.int64)

    # top up to the exact target (caps above can leave a shortfall)
    have = set((edges[:, 0] * ni + edges[:, 1]).tolist())
    extra = []
    pw = w / w.sum()
    while len(have) < E:
        q = int(rng.integers(nq))
        i = int(rng.choice(ni, p=pw))
        key = q * ni + i
        if key not in have:
            have.add(key)
            extra.append((q, i))
    if extra:
        edges = np.concatenate([edges, np.asarray(extra, dtype=np.int64)])
    edges = edges[np.lexsort((edges[:, 1], edges[:, 0]))]
    return BipartiteGraph(nq, ni, edges), qtopic


def generate_sessions(spec: GenSpec, bipartite: BipartiteGraph | None = None) -> Hypergraph:
    """Topic-coherent sessions.

    Each session draws a topic uniformly; each slot takes a uniform item of
    that topic with probability ``topic_coherence`` and a uniform item
    otherwise. Sessions that dedupe below ``session_min`` are redrawn.
    """
    if bipartite is not None and bipartite.num_items != spec.num_items:
        raise GraphInputError("bipartite graph item count differs from the generator spec")
    rng = _streams(spec)["sessions"]
    topics = item_topics(spec)
    members = [np.flatnonzero(topics == t) for t in range(spec.num_topics)]
    records = []
    while len(records) < spec.num_sessions:
        t = int(rng.integers(spec.num_topics))
        size = spec.session_min - 1 + int(rng.geometric(spec.session_geom_p))
        in_topic = rng.random(size) < spec.topic_coherence
        pool = members[t]
        items = np.where(
            in_topic,
            pool[rng.integers(0, len(pool), size=size)] if len(pool) else rng.integers(0, spec.num_items, size=size),
            rng.integers(0, spec.num_items, size=size),
        )
        items = set(items.tolist())
        if len(items) >= spec.session_min:
            records.append(items)
    return build_hypergraph(records, spec.num_items)


def generate_query_tokens(spec: GenSpec, query_topics: np.ndarray) -> list[list[str]]:
    """Each query gets a small multiset of topic words and generic words."""
    rng = _streams(spec)["tokens"]
    lo, hi = spec.tokens_per_query
    out = []
    for t in query_topics:
        n = int(rng.integers(lo, hi + 1))
        toks = []
        for _ in range(n):
            if rng.random() < spec.query_topic_coherence:
                toks.append(f"t{t}w{int(rng.integers(spec.topic_vocab))}")
            else:
                toks.append(f"g{int(rng.integers(spec.generic_vocab))}")
        out.append(toks)
    return out


def generate(spec: GenSpec) -> Dataset:
    g_b, qt = generate_bipartite(spec)
    g_h = generate_sessions(spec, g_b)
    return Dataset(g_b, g_h, generate_query_tokens(spec, qt), item_topics(spec), qt, spec)


# --------------------------------------------------------------------------
# query features
# --------------------------------------------------------------------------


def _token_hash(tok: str) -> int:
    return zlib.crc32(tok.encode("utf-8"))


def hashed_features(tokens: list[list[str]], dim: int) -> np.ndarray:
    """Signed feature hashing of token multisets, rows scaled to unit norm."""
    x = np.zeros((len(tokens), dim))
    for r, toks in enumerate(tokens):
        for tok in toks:
            h = _token_hash(tok)
            x[r, h % dim] += 1.0 if (h >> 16) & 1 else -1.0
    norms = np.linalg.norm(x, axis=1, keepdims=True)
    return np.divide(x, norms, out=np.zeros_like(x), where=norms > 0)


def random_features(num_queries: int, dim: int, seed: int) -> np.ndarray:
    rng = np.random.default_rng(seed)
    return rng.normal(0.0, 1.0 / np.sqrt(dim), size=(num_queries, dim))


def query_features(ds: Dataset, dim: int, seed: int = 0) -> np.ndarray:
    if ds.query_tokens is not None:
        return hashed_features(ds.query_tokens, dim)
    return random_features(ds.bipartite.num_queries, dim, seed)


# --------------------------------------------------------------------------
# file formats
# --------------------------------------------------------------------------


def save_edges(path, g: BipartiteGraph) -> None:
    e = g.edges[np.lexsort((g.edges[:, 1], g.edges[:, 0]))]
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.writelines(f"{q}\t{i}\n" for q, i in e.tolist())


def load_edges(path, num_queries: int | None = None, num_items: int | None = None) -> BipartiteGraph:
    pairs = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.rstrip("\n")
            if not line:
                continue
            parts = line.split("\t")
            if len(parts) != 2:
                raise ParseError(f"{path}:{lineno}: expected 'query<TAB>item', got {line!r}")
            try:
                q, i = int(parts[0]), int(parts[1])
            except ValueError:
                raise ParseError(f"{path}:{lineno}: non-integer id in {line!r}") from None
            if q < 0 or i < 0:
                raise GraphInputError(f"{path}:{lineno}: negative id")
            if (num_queries is not None and q >= num_queries) or (num_items is not None and i >= num_items):
                raise GraphInputError(f"{path}:{lineno}: id out of range in {line!r}")
            pairs.append((q, i))
    arr = np.asarray(pairs, dtype=np.int64).reshape(-1, 2)
    nq = num_queries if num_queries is not None else (int(arr[:, 0].max()) + 1 if len(arr) else 0)
    ni = num_items if num_items is not None else (int(arr[:, 1].max()) + 1 if len(arr) else 0)
    return BipartiteGraph(nq, ni, arr)


def save_hyperedges(path, h: Hypergraph) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.writelines(" ".join(map(str, e)) + "\n" for e in h.hyperedges)


def load_hyperedges(path, num_items: int | None = None) -> Hypergraph:
    records = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            toks = line.split()
            if not toks:
                continue
            try:
                rec = [int(t) for t in toks]
            except ValueError:
                raise ParseError(f"{path}:{lineno}: non-integer item id in {line.rstrip()!r}") from None
            if min(rec) < 0 or (num_items is not None and max(rec) >= num_items):
                raise GraphInputError(f"{path}:{lineno}: item id out of range")
            records.append(rec)
    n = num_items if num_items is not None else (max(max(r) for r in records) + 1 if records else 0)
    return build_hypergraph(records, n)


def save_tokens(path, tokens: list[list[str]]) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.writelines(" ".join(t) + "\n" for t in tokens)


def load_tokens(path) -> list[list[str]]:
    with open(path, encoding="utf-8") as fh:
        return [line.split() for line in fh]


EDGES_FILE, HYPEREDGES_FILE, TOKENS_FILE, MANIFEST_FILE = "edges.tsv", "hyperedges.txt", "queries.txt", "manifest.json"


def save_dataset(directory, ds: Dataset) -> None:
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    save_edges(d / EDGES_FILE, ds.bipartite)
    save_hyperedges(d / HYPEREDGES_FILE, ds.hypergraph)
    if ds.query_tokens is not None:
        save_tokens(d / TOKENS_FILE, ds.query_tokens)
    manifest = {
        "num_queries": ds.bipartite.num_queries,
        "num_items": ds.bipartite.num_items,
        "counts": {"edges": ds.bipartite.num_edges, "hyperedges": ds.hypergraph.num_hyperedges},
        "spec": ds.spec.to_dict() if ds.spec else None,
        "seed": ds.spec.seed if ds.spec else None,
    }
    (d / MANIFEST_FILE).write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")


def load_dataset(directory) -> Dataset:
    d = Path(directory)
    mpath = d / MANIFEST_FILE
    nq = ni = None
    spec = None
    if mpath.exists():
        m = json.loads(mpath.read_text())
        nq, ni = m["num_queries"], m["num_items"]
        spec = GenSpec.from_dict(m["spec"]) if m.get("spec") else None
    g_b = load_edges(d / EDGES_FILE, nq, ni)
    g_h = load_hyperedges(d / HYPEREDGES_FILE, g_b.num_items) if (d / HYPEREDGES_FILE).exists() \
        else Hypergraph(g_b.num_items, ())
    tokens = load_tokens(d / TOKENS_FILE) if (d / TOKENS_FILE).exists() else None
    if tokens is not None and len(tokens) != g_b.num_queries:
        raise GraphInputError(f"{d / TOKENS_FILE}: {len(tokens)} lines for {g_b.num_queries} queries")
    return Dataset(g_b, g_h, tokens, spec=spec)
