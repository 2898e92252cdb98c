"""Dual-channel attention hypergraph model: bipartite GCN channel, hypergraph channel, channel attention."""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Literal

import numpy as np

from .graph import PropagationOperator
from .linalg import Node, ShapeError, Tape

Mode = Literal["dcah", "gcn_only", "hyper_only"]
MODES: tuple[str, ...] = ("dcah", "gcn_only", "hyper_only")


class ModelConfigError(ValueError):
    """Mode, dimensions or operators do not fit together."""


@dataclass(frozen=True)
class ModelConfig:
    num_queries: int
    num_items: int
    hidden_dim: int = 64
    num_layers: int = 2
    mode: str = "dcah"
    dropout: float = 0.25

    def __post_init__(self):
        if self.mode not in MODES:
            raise ModelConfigError(f"unknown mode {self.mode!r}; expected one of {MODES}")
        if self.num_layers < 1:
            raise ModelConfigError("at least one propagation layer is required")
        if self.hidden_dim < 1:
            raise ModelConfigError("hidden_dim must be positive")
        if not 0.0 <= self.dropout < 1.0:
            raise ModelConfigError("dropout must lie in [0, 1)")


def _glorot(rng: np.random.Generator, fan_in: int, fan_out: int) -> np.ndarray:
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=(fan_in, fan_out))


@dataclass
class DcahModel:
    """Parameters plus the frozen query features.

    ``params`` maps names to float64 arrays. Layer weights are named
    ``theta_bg_{l}`` / ``theta_hg_{l}``; the projection head used by
    contrastive pretraining lives here too (``proj_*``) so it survives in
    checkpoints.
    """

    config: ModelConfig
    query_features: np.ndarray
    params: dict[str, np.ndarray] = field(default_factory=dict)

    @classmethod
    def init(cls, config: ModelConfig, query_features: np.ndarray, rng: np.random.Generator) -> "DcahModel":
        d, L = config.hidden_dim, config.num_layers
        qf = np.asarray(query_features, dtype=np.float64)
        if qf.shape != (config.num_queries, d):
            raise ModelConfigError(f"query features must be {(config.num_queries, d)}, got {qf.shape}")
        p: dict[str, np.ndarray] = {}
        std = 1.0 / np.sqrt(d)
        p["item_bg"] = rng.normal(0.0, std, size=(config.num_items, d))
        p["item_hg"] = rng.normal(0.0, std, size=(config.num_items, d))
        for l in range(L):
            p[f"theta_bg_{l}"] = _glorot(rng, d, d)
        for l in range(L):
            p[f"theta_hg_{l}"] = _glorot(rng, d, d)
        p["attn_W"] = _glorot(rng, d, d)
        p["attn_b"] = np.zeros((1, d))
        p["attn_q"] = rng.normal(0.0, std, size=(d, 1))
        p["proj_W1"] = _glorot(rng, d, d)
        p["proj_b1"] = np.zeros((1, d))
        p["proj_W2"] = _glorot(rng, d, d)
        p["proj_b2"] = np.zeros((1, d))
        return cls(config, qf, p)

    def trainable_names(self, include_projection: bool = False) -> list[str]:
        """Parameters that reach the link score in the current mode."""
        mode, L = self.config.mode, self.config.num_layers
        names: list[str] = []
        if mode in ("dcah", "gcn_only"):
            names += ["item_bg"] + [f"theta_bg_{l}" for l in range(L)]
        if mode in ("dcah", "hyper_only"):
            names += ["item_hg"] + [f"theta_hg_{l}" for l in range(L)]
        if mode == "dcah":
            names += ["attn_W", "attn_b", "attn_q"]
        if include_projection:
            names += ["proj_W1", "proj_b1", "proj_W2", "proj_b2"]
        return names

    def copy(self) -> "DcahModel":
        return DcahModel(self.config, self.query_features.copy(), {k: v.copy() for k, v in self.params.items()})

    # checkpoint I/O ---------------------------------------------------------
    def to_json(self, extra: dict | None = None) -> str:
        def enc(a: np.ndarray) -> dict:
            return {"shape": list(a.shape), "data": [float(x) for x in a.ravel()]}

        doc = {
            "config": asdict(self.config),
            "query_features": enc(self.query_features),
            "params": {k: enc(self.params[k]) for k in sorted(self.params)},
        }
        if extra:
            doc.update(extra)
        return json.dumps(doc, sort_keys=True)

    def save(self, path: str | Path, embeddings: tuple[np.ndarray, np.ndarray] | None = None, **extra) -> None:
        """Write a JSON checkpoint; ``embeddings`` (queries, items) are stored for analytics."""
        if embeddings is not None:
            q, i = embeddings
            extra["embeddings"] = {
                "query": {"shape": list(q.shape), "data": [float(x) for x in q.ravel()]},
                "item": {"shape": list(i.shape), "data": [float(x) for x in i.ravel()]},
            }
        Path(path).write_text(self.to_json(extra))

    @classmethod
    def load(cls, path: str | Path) -> "DcahModel":
        doc = json.loads(Path(path).read_text())
        return cls.from_doc(doc)

    @classmethod
    def from_doc(cls, doc: dict) -> "DcahModel":
        def dec(e) -> np.ndarray:
            return np.asarray(e["data"], dtype=np.float64).reshape(e["shape"])

        cfg = ModelConfig(**doc["config"])
        return cls(cfg, dec(doc["query_features"]), {k: dec(v) for k, v in doc["params"].items()})


def load_checkpoint_embeddings(path: str | Path) -> tuple[np.ndarray, np.ndarray] | None:
    doc = json.loads(Path(path).read_text())
    emb = doc.get("embeddings")
    if emb is None:
        return None
    q, i = emb["query"], emb["item"]
    return (np.asarray(q["data"]).reshape(q["shape"]), np.asarray(i["data"]).reshape(i["shape"]))


@dataclass
class ChannelOutput:
    queries: Node
    items: Node
    item_bg: Node | None
    item_hg: Node | None
    beta: np.ndarray  # (BG, HG) weights


def _propagate(tape: Tape, op: PropagationOperator, x: Node, thetas: list[Node],
               dropout: float, rng: np.random.Generator | None) -> Node:
    if op.size != x.shape[0]:
        raise ShapeError(f"operator of size {op.size} applied to {x.shape[0]} rows")
    h = x
    for l, theta in enumerate(thetas):
        h = tape.matmul(tape.spmm(op.normalized, h), theta)
        if l < len(thetas) - 1:
            h = tape.relu(h)
            if dropout > 0 and rng is not None:
                keep = rng.random(h.shape) >= dropout
                h = tape.mask(h, keep / (1.0 - dropout))
    return h


def forward_bipartite(tape: Tape, op: PropagationOperator, x0: Node, thetas: list[Node],
                      dropout: float = 0.0, rng: np.random.Generator | None = None) -> Node:
    """Stacked bipartite convolutions ``op @ X @ theta`` with ReLU between layers."""
    if op.kind != "bipartite":
        raise ModelConfigError("bipartite channel needs a bipartite operator")
    return _propagate(tape, op, x0, thetas, dropout, rng)


def forward_hypergraph(tape: Tape, op: PropagationOperator, x0: Node, thetas: list[Node],
                       dropout: float = 0.0, rng: np.random.Generator | None = None) -> Node:
    if op.kind != "hypergraph":
        raise ModelConfigError("hypergraph channel needs a hypergraph operator")
    return _propagate(tape, op, x0, thetas, dropout, rng)


def fuse_channels(tape: Tape, x_bg: Node, x_hg: Node, W: Node, b: Node, q: Node) -> tuple[Node, Node]:
    """Attention-weighted sum of the two item embeddings.

    Channel importance is the mean over items of ``q . tanh(W x + b)``; the
    two importances go through a softmax. W, b, q are shared by both channels.
    Returns the fused items and the 1 x 2 weight node.
    """
    if x_bg.shape != x_hg.shape:
        raise ShapeError(f"channel shapes differ: {x_bg.shape} vs {x_hg.shape}")

    def importance(x: Node) -> Node:
        # row-vector convention: x @ W^T equals (W x_i) for every row
        h = tape.tanh(tape.add(tape.matmul(x, tape.transpose(W)), b))
        return tape.mean(tape.matmul(h, q))

    w = tape.hstack(importance(x_bg), importance(x_hg))
    beta = tape.softmax(w)
    fused = tape.add(tape.mul(x_bg, tape.cols(beta, [0])), tape.mul(x_hg, tape.cols(beta, [1])))
    return fused, beta


def forward(model: DcahModel, tape: Tape, bip_op: PropagationOperator | None, hyp_op: PropagationOperator | None,
            nodes: dict[str, Node] | None = None, *, query_features: np.ndarray | None = None,
            training: bool = False, rng: np.random.Generator | None = None) -> tuple[ChannelOutput, dict[str, Node]]:
    """Full forward pass for the model's mode.

    ``nodes`` lets the caller reuse parameter leaves already placed on the
    tape; missing ones are created as trainable leaves. ``query_features``
    overrides the frozen features (used by feature-masking augmentation).
    """
    cfg = model.config
    nodes = {} if nodes is None else nodes

    def p(name: str) -> Node:
        if name not in nodes:
            nodes[name] = tape.param(model.params[name], name=name)
        return nodes[name]

    qf = model.query_features if query_features is None else query_features
    xq0 = tape.const(qf, name="query_features")
    dropout = cfg.dropout if training else 0.0
    L = cfg.num_layers

    if cfg.mode in ("dcah", "gcn_only"):
        if bip_op is None:
            raise ModelConfigError(f"mode {cfg.mode} needs a bipartite operator")
        if bip_op.size != cfg.num_queries + cfg.num_items:
            raise ModelConfigError("bipartite operator does not match model node count")
    if cfg.mode in ("dcah", "hyper_only"):
        if hyp_op is None:
            raise ModelConfigError(f"mode {cfg.mode} needs a hypergraph operator")
        if hyp_op.size != cfg.num_items:
            raise ModelConfigError("hypergraph operator does not match model item count")

    x_bg = x_hg = None
    queries = xq0
    if cfg.mode in ("dcah", "gcn_only"):
        x0 = tape.vstack(xq0, p("item_bg"))
        out = forward_bipartite(tape, bip_op, x0, [p(f"theta_bg_{l}") for l in range(L)], dropout, rng)
        queries = tape.slice_rows(out, 0, cfg.num_queries)
        x_bg = tape.slice_rows(out, cfg.num_queries, cfg.num_queries + cfg.num_items)
    if cfg.mode in ("dcah", "hyper_only"):
        x_hg = forward_hypergraph(tape, hyp_op, p("item_hg"), [p(f"theta_hg_{l}") for l in range(L)], dropout, rng)

    if cfg.mode == "dcah":
        items, beta = fuse_channels(tape, x_bg, x_hg, p("attn_W"), p("attn_b"), p("attn_q"))
        beta_val = beta.value.ravel().copy()
    elif cfg.mode == "gcn_only":
        items, beta_val = x_bg, np.array([1.0, 0.0])
    else:
        items, beta_val = x_hg, np.array([0.0, 1.0])
    return ChannelOutput(queries, items, x_bg, x_hg, beta_val), nodes


def score_links(queries: np.ndarray, items: np.ndarray, pairs) -> np.ndarray:
    """Dot-product link scores for ``(query, item)`` pairs."""
    pairs = np.asarray(pairs, dtype=np.int64).reshape(-1, 2)
    if len(pairs) and (pairs[:, 0].min() < 0 or pairs[:, 0].max() >= len(queries)
                       or pairs[:, 1].min() < 0 or pairs[:, 1].max() >= len(items)):
        raise IndexError("link pair index out of range")
    return np.einsum("ij,ij->i", queries[pairs[:, 0]], items[pairs[:, 1]])


def score_links_node(tape: Tape, out: ChannelOutput, pairs) -> Node:
    pairs = np.asarray(pairs, dtype=np.int64).reshape(-1, 2)
    return tape.row_dot(tape.rows(out.queries, pairs[:, 0]), tape.rows(out.items, pairs[:, 1]))


def embed(model: DcahModel, bip_op, hyp_op) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Inference-mode embeddings (queries, items, beta)."""
    tape = Tape()
    out, _ = forward(model, tape, bip_op, hyp_op)
    return out.queries.value, out.items.value, out.beta
