"""Link-prediction training, DropEdge, and contrastive pretraining."""
from __future__ import annotations

import csv
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .evaluation import EvalProtocol, evaluate_embeddings, mrr
from .graph import (BipartiteGraph, GraphInputError, Hypergraph, PropagationOperator, bipartite_operator,
                    hypergraph_operator)
from .linalg import Node, Tape
from .model import DcahModel, embed, forward, score_links_node

log = logging.getLogger(__name__)


class NumericalError(FloatingPointError):
    """Training produced a non-finite loss."""


class TrainConfigError(ValueError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    lr: float = 1e-3
    hidden_dim: int = 64
    num_layers: int = 2
    batch_size: int = 1024
    dropout: float = 0.25
    tau: float = 0.1
    dropedge_rate: float = 0.0
    dropedge_rate_bipartite: float | None = None
    dropedge_rate_hypergraph: float | None = None
    ssl_epochs: int = 0
    train_epochs: int = 50
    aug_edge_drop: float = 0.2
    aug_feature_mask: float = 0.2
    num_negatives: int = 5
    ssl_include_positive: bool = False
    seed: int = 0

    def __post_init__(self):
        rates = {"dropout": self.dropout, "dropedge_rate": self.dropedge_rate,
                 "aug_edge_drop": self.aug_edge_drop, "aug_feature_mask": self.aug_feature_mask}
        for extra in ("dropedge_rate_bipartite", "dropedge_rate_hypergraph"):
            if getattr(self, extra) is not None:
                rates[extra] = getattr(self, extra)
        for name, r in rates.items():
            if not 0.0 <= r < 1.0:
                raise TrainConfigError(f"{name} must lie in [0, 1), got {r}")
        if self.tau <= 0:
            raise TrainConfigError("tau must be positive")
        if self.lr < 0:
            raise TrainConfigError("lr must be non-negative")
        if self.batch_size < 2:
            raise TrainConfigError("batch_size must be at least 2")
        if min(self.ssl_epochs, self.train_epochs, self.num_negatives) < 0:
            raise TrainConfigError("epoch and negative counts must be non-negative")

    @property
    def bipartite_drop(self) -> float:
        return self.dropedge_rate if self.dropedge_rate_bipartite is None else self.dropedge_rate_bipartite

    @property
    def hypergraph_drop(self) -> float:
        return self.dropedge_rate if self.dropedge_rate_hypergraph is None else self.dropedge_rate_hypergraph

    def to_dict(self) -> dict:
        return asdict(self)


class Adam:
    """Adam over a dict of named arrays, updated in place."""

    def __init__(self, lr: float, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}
        self.t = 0

    def step(self, params: dict[str, np.ndarray], grads: dict[str, np.ndarray]) -> None:
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        for name, g in grads.items():
            m = self.m.setdefault(name, np.zeros_like(g))
            v = self.v.setdefault(name, np.zeros_like(g))
            m *= b1
            m += (1 - b1) * g
            v *= b2
            v += (1 - b2) * g * g
            mhat = m / (1 - b1 ** self.t)
            vhat = v / (1 - b2 ** self.t)
            params[name] -= self.lr * mhat / (np.sqrt(vhat) + self.eps)


# --------------------------------------------------------------------------
# augmentation
# --------------------------------------------------------------------------


def dropedge(g: BipartiteGraph | Hypergraph, rate: float, rng: np.random.Generator):
    """Keep each edge (or each item-hyperedge incidence) with probability ``1 - rate``.

    Hyperedges left with fewer than two items disappear.
    """
    if not 0.0 <= rate < 1.0:
        raise TrainConfigError(f"dropedge rate must lie in [0, 1), got {rate}")
    if isinstance(g, BipartiteGraph):
        if rate == 0.0:
            return g
        keep = rng.random(g.num_edges) >= rate
        return g.with_edges(g.edges[keep])
    if rate == 0.0:
        return g
    sizes = g.edge_degrees()
    keep = rng.random(int(sizes.sum())) >= rate
    edges, weights, pos = [], [], 0
    for e, wt, s in zip(g.hyperedges, g.weights, sizes):
        kept = tuple(x for x, k in zip(e, keep[pos:pos + s]) if k)
        pos += s
        if len(kept) >= 2:
            edges.append(kept)
            weights.append(wt)
    return Hypergraph(g.num_items, tuple(edges), np.asarray(weights, dtype=np.float64))


@dataclass
class View:
    bipartite: BipartiteGraph
    hypergraph: Hypergraph
    query_features: np.ndarray
    bip_op: PropagationOperator = field(init=False)
    hyp_op: PropagationOperator = field(init=False)

    def __post_init__(self):
        self.bip_op = bipartite_operator(self.bipartite)
        self.hyp_op = hypergraph_operator(self.hypergraph)


@dataclass
class AugmentedPair:
    view_i: View
    view_j: View


def augment(g_b: BipartiteGraph, g_h: Hypergraph, query_features: np.ndarray, edge_drop: float,
            feature_mask: float, rng: np.random.Generator) -> AugmentedPair:
    """Two independent views: edge dropping on both graphs plus query-feature column masking."""

    def one() -> View:
        b = dropedge(g_b, edge_drop, rng)
        h = dropedge(g_h, edge_drop, rng)
        qf = query_features
        if feature_mask > 0:
            cols = rng.random(query_features.shape[1]) >= feature_mask
            qf = query_features * cols[None, :]
        return View(b, h, qf)

    return AugmentedPair(one(), one())


# --------------------------------------------------------------------------
# contrastive objective
# --------------------------------------------------------------------------


def projection_head(tape: Tape, x: Node, W1: Node, b1: Node, W2: Node, b2: Node) -> Node:
    """Two-layer perceptron applied row-wise: relu(x W1 + b1) W2 + b2."""
    h = tape.relu(tape.add(tape.matmul(x, W1), b1))
    return tape.add(tape.matmul(h, W2), b2)


def contrastive_loss(tape: Tape, z_i: Node, z_j: Node, tau: float, include_positive: bool = False) -> Node:
    """Cross-view node contrastive loss with cosine similarity and temperature ``tau``.

    For node n the positive is (z_i[n], z_j[n]); the denominator sums over
    z_j[n'] for n' != n, plus the positive itself when ``include_positive``.
    """
    if z_i.shape != z_j.shape:
        raise ValueError(f"view shapes differ: {z_i.shape} vs {z_j.shape}")
    B = z_i.shape[0]
    if B < 2:
        raise ValueError("contrastive loss needs at least two nodes")
    zi, zj = tape.l2_normalize(z_i), tape.l2_normalize(z_j)
    sim = tape.scale(tape.matmul(zi, tape.transpose(zj)), 1.0 / tau)
    include = np.ones((B, B), dtype=bool)
    if not include_positive:
        np.fill_diagonal(include, False)
    per_node = tape.sub(tape.logsumexp(sim, include), tape.diag(sim))
    return tape.mean(per_node)


def contrastive_loss_value(z_i: np.ndarray, z_j: np.ndarray, tau: float, include_positive: bool = False) -> float:
    tape = Tape()
    return float(contrastive_loss(tape, tape.const(z_i), tape.const(z_j), tau, include_positive).value[0, 0])


# --------------------------------------------------------------------------
# loops
# --------------------------------------------------------------------------


def _apply_grads(model: DcahModel, nodes: dict[str, Node], names: list[str], opt: Adam) -> None:
    grads = {n: nodes[n].grad for n in names if n in nodes and nodes[n].grad is not None}
    opt.step(model.params, grads)


def _check(loss: float, stage: str, epoch: int) -> None:
    if not np.isfinite(loss):
        raise NumericalError(f"{stage}: non-finite loss at epoch {epoch}")


def pretrain_ssl(model: DcahModel, g_b: BipartiteGraph, g_h: Hypergraph, cfg: TrainConfig,
                 rng: np.random.Generator, log_rows: list | None = None) -> DcahModel:
    """Contrastive pretraining of the encoder (and projection head) in place."""
    if cfg.ssl_epochs == 0:
        return model
    opt = Adam(cfg.lr)
    names = model.trainable_names(include_projection=True)
    hyper_only = model.config.mode == "hyper_only"
    for epoch in range(cfg.ssl_epochs):
        pair = augment(g_b, g_h, model.query_features, cfg.aug_edge_drop, cfg.aug_feature_mask, rng)
        tape = Tape()
        nodes: dict[str, Node] = {}
        hs = []
        for view in (pair.view_i, pair.view_j):
            out, nodes = forward(model, tape, view.bip_op, view.hyp_op, nodes,
                                 query_features=view.query_features, training=True, rng=rng)
            hs.append(out.items if hyper_only else tape.vstack(out.queries, out.items))
        # rows that are all zero in a view (hypergraph-isolated items, masked featureless
        # queries) have no direction to contrast; the batch is drawn from the rest
        pool = np.flatnonzero(np.any(hs[0].value != 0, axis=1) & np.any(hs[1].value != 0, axis=1))
        if len(pool) < 2:
            raise NumericalError(f"pretrain: fewer than two embeddable nodes at epoch {epoch}")
        batch = np.sort(rng.choice(pool, size=min(cfg.batch_size, len(pool)), replace=False))
        proj = [_param(tape, model, nodes, n) for n in ("proj_W1", "proj_b1", "proj_W2", "proj_b2")]
        zs = [projection_head(tape, tape.rows(h, batch), *proj) for h in hs]
        loss = contrastive_loss(tape, zs[0], zs[1], cfg.tau, cfg.ssl_include_positive)
        lv = float(loss.value[0, 0])
        _check(lv, "pretrain", epoch)
        tape.backward(loss)
        _apply_grads(model, nodes, names, opt)
        if log_rows is not None:
            log_rows.append({"stage": "pretrain", "epoch": epoch, "loss": lv, "val_mrr": ""})
    return model


def _param(tape: Tape, model: DcahModel, nodes: dict[str, Node], name: str) -> Node:
    if name not in nodes:
        nodes[name] = tape.param(model.params[name], name=name)
    return nodes[name]


def corrupt(pos: np.ndarray, k: int, num_queries: int, num_items: int, rng: np.random.Generator) -> np.ndarray:
    """``k`` uniform corruptions per positive; each replaces the query or the item with equal odds."""
    rep = np.repeat(pos, k, axis=0)
    side = rng.random(len(rep)) < 0.5
    rand_q = rng.integers(0, num_queries, size=len(rep))
    rand_i = rng.integers(0, num_items, size=len(rep))
    out = rep.copy()
    out[side, 0] = rand_q[side]
    out[~side, 1] = rand_i[~side]
    return out


def link_loss(tape: Tape, out, pos: np.ndarray, neg: np.ndarray) -> Node:
    """Class-balanced BCE: mean positive term and mean negative term weigh one half each."""
    lp = tape.bce_with_logits(score_links_node(tape, out, pos), np.ones(len(pos)))
    if len(neg) == 0:
        return lp
    ln = tape.bce_with_logits(score_links_node(tape, out, neg), np.zeros(len(neg)))
    return tape.scale(tape.add(lp, ln), 0.5)


def validation_mrr(model: DcahModel, bip_op, hyp_op, edges: np.ndarray, negs: np.ndarray) -> float:
    if len(edges) == 0:
        return float("nan")
    q, i, _ = embed(model, bip_op, hyp_op)
    pos = np.einsum("ij,ij->i", q[edges[:, 0]], i[edges[:, 1]])
    neg = np.einsum("rkj,rkj->rk", q[negs[..., 0]], i[negs[..., 1]])
    return mrr(pos, neg)


def train_link_prediction(model: DcahModel, g_h: Hypergraph, protocol: EvalProtocol, cfg: TrainConfig,
                          rng: np.random.Generator, log_rows: list | None = None) -> DcahModel:
    """Supervised BCE training on the protocol's train edges; keeps the best-validation parameters."""
    train = protocol.train
    if len(train) == 0:
        raise GraphInputError("training split is empty")
    g_b = protocol.train_graph()
    full_bip, full_hyp = bipartite_operator(g_b), hypergraph_operator(g_h)
    val_edges, val_negs = protocol.all_val()
    opt = Adam(cfg.lr)
    names = model.trainable_names()
    nq, ni = model.config.num_queries, model.config.num_items

    best_mrr, best = -np.inf, None
    if cfg.train_epochs == 0:
        return model
    for epoch in range(cfg.train_epochs):
        if cfg.bipartite_drop > 0 or cfg.hypergraph_drop > 0:
            bip_op = bipartite_operator(dropedge(g_b, cfg.bipartite_drop, rng))
            hyp_op = hypergraph_operator(dropedge(g_h, cfg.hypergraph_drop, rng))
        else:
            bip_op, hyp_op = full_bip, full_hyp
        perm = train[rng.permutation(len(train))]
        losses = []
        for start in range(0, len(perm), cfg.batch_size):
            pos = perm[start:start + cfg.batch_size]
            neg = corrupt(pos, cfg.num_negatives, nq, ni, rng)
            tape = Tape()
            out, nodes = forward(model, tape, bip_op, hyp_op, training=True, rng=rng)
            loss = link_loss(tape, out, pos, neg)
            lv = float(loss.value[0, 0])
            _check(lv, "train", epoch)
            tape.backward(loss)
            _apply_grads(model, nodes, names, opt)
            losses.append(lv)
        val = validation_mrr(model, full_bip, full_hyp, val_edges, val_negs)
        if best is None or val > best_mrr:
            best_mrr, best = val, {k: v.copy() for k, v in model.params.items()}
        if log_rows is not None:
            log_rows.append({"stage": "train", "epoch": epoch, "loss": float(np.mean(losses)), "val_mrr": val})
        log.debug("epoch %d loss %.5f val_mrr %.4f", epoch, np.mean(losses), val)
    if best is not None:
        model.params.update(best)
    return model


def write_log(path, rows: list[dict]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=["stage", "epoch", "loss", "val_mrr"], lineterminator="\n")
        w.writeheader()
        for r in rows:
            w.writerow({k: (repr(v) if isinstance(v, float) else v) for k, v in r.items()})


def evaluate_model(model: DcahModel, protocol: EvalProtocol, g_h: Hypergraph) -> dict:
    bip_op, hyp_op = bipartite_operator(protocol.train_graph()), hypergraph_operator(g_h)
    q, i, beta = embed(model, bip_op, hyp_op)
    return {"parts": evaluate_embeddings(q, i, protocol.test, protocol.test_negatives),
            "beta": [float(b) for b in beta], "embeddings": (q, i)}
