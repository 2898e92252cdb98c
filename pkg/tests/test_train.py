import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from dcah.datagen import GenSpec, generate, query_features
from dcah.evaluation import split_four_parts
from dcah.graph import BipartiteGraph, build_hypergraph
from dcah.linalg import Tape
from dcah.model import DcahModel, ModelConfig
from dcah.train import (
    Adam,
    NumericalError,
    TrainConfig,
    TrainConfigError,
    augment,
    contrastive_loss,
    contrastive_loss_value,
    corrupt,
    dropedge,
    pretrain_ssl,
    projection_head,
    train_link_prediction,
    write_log,
)
from oracles import contrastive_double_loop


# --- config -----------------------------------------------------------------------


def test_defaults():
    c = TrainConfig()
    assert (c.lr, c.hidden_dim, c.num_layers, c.batch_size, c.dropout, c.tau) == (1e-3, 64, 2, 1024, 0.25, 0.1)


@pytest.mark.parametrize("bad", [dict(tau=0.0), dict(dropout=1.0), dict(dropedge_rate=-0.1),
                                 dict(aug_edge_drop=1.0), dict(lr=-1.0), dict(batch_size=1)])
def test_invalid_config(bad):
    with pytest.raises(TrainConfigError):
        TrainConfig(**bad)


def test_per_graph_dropedge_rates():
    c = TrainConfig(dropedge_rate=0.2, dropedge_rate_hypergraph=0.05)
    assert (c.bipartite_drop, c.hypergraph_drop) == (0.2, 0.05)


# --- contrastive loss ------------------------------------------------------------


@settings(max_examples=40, deadline=None)
@given(st.integers(2, 64), st.integers(1, 12), st.integers(0, 2**31 - 1), st.booleans())
def test_contrastive_matches_double_loop(b, d, seed, include_positive):
    rng = np.random.default_rng(seed)
    zi, zj = rng.normal(size=(b, d)), rng.normal(size=(b, d))
    ref = contrastive_double_loop(zi.tolist(), zj.tolist(), 0.1, include_positive)
    assert abs(contrastive_loss_value(zi, zj, 0.1, include_positive) - ref) <= 1e-10


@pytest.mark.parametrize("b", [2, 3, 17, 64])
def test_identical_rows_give_log_b_minus_one(b):
    z = np.tile(np.array([[0.3, -1.0, 2.0]]), (b, 1))
    assert abs(contrastive_loss_value(z, z.copy(), 0.1) - math.log(b - 1)) <= 1e-9


def test_two_node_closed_form():
    zi = np.array([[1.0, 0.0], [0.0, 1.0]])
    zj = zi.copy()
    # positives aligned (sim 1), the cross pair orthogonal (sim 0)
    assert contrastive_loss_value(zi, zj, 0.1) == pytest.approx(-1 / 0.1, abs=1e-12)


def test_scale_invariance():
    rng = np.random.default_rng(0)
    zi, zj = rng.normal(size=(8, 4)), rng.normal(size=(8, 4))
    a = contrastive_loss_value(zi, zj, 0.1)
    assert contrastive_loss_value(5 * zi, 5 * zj, 0.1) == pytest.approx(a, abs=1e-12)
    scales = rng.uniform(0.1, 10, size=(8, 1))
    assert contrastive_loss_value(scales * zi, zj, 0.1) == pytest.approx(a, abs=1e-12)


def test_zero_row_has_zero_similarity():
    zi = np.array([[0.0, 0.0], [1.0, 0.0]])
    zj = np.array([[1.0, 0.0], [0.0, 1.0]])
    # node 0: every similarity is 0; node 1: negative 1/tau, positive 0
    assert contrastive_loss_value(zi, zj, 0.1) == pytest.approx(5.0, abs=1e-12)


def test_projection_head_examples():
    t = Tape()
    x = t.const(np.random.default_rng(0).normal(size=(3, 2)))
    b2 = np.array([[1.0, -2.0]])
    z = projection_head(t, x, t.const(np.zeros((2, 2))), t.const(np.zeros((1, 2))), t.const(np.zeros((2, 2))),
                        t.const(b2))
    np.testing.assert_array_equal(z.value, np.tile(b2, (3, 1)))
    t = Tape()
    one = projection_head(t, t.const([[2.5], [0.5]]), t.const([[1.0]]), t.const([[0.0]]), t.const([[1.0]]),
                          t.const([[0.0]]))
    np.testing.assert_array_equal(one.value, [[2.5], [0.5]])


# --- dropedge and augmentation --------------------------------------------------------


def test_dropedge_zero_rate_is_identity():
    g = BipartiteGraph.from_pairs(3, 3, [(0, 0), (1, 2)])
    assert dropedge(g, 0.0, np.random.default_rng(0)) is g
    with pytest.raises(TrainConfigError):
        dropedge(g, 1.0, np.random.default_rng(0))


def test_dropedge_binomial_bounds():
    rng = np.random.default_rng(0)
    edges = [(q, i) for q in range(100) for i in range(100)]
    g = BipartiteGraph.from_pairs(100, 100, edges)
    kept = dropedge(g, 0.5, rng).num_edges
    assert 4800 <= kept <= 5200


def test_dropedge_keep_frequency_per_edge():
    g = BipartiteGraph.from_pairs(5, 4, [(q, i) for q in range(5) for i in range(4)])
    rng = np.random.default_rng(1)
    r, trials = 0.3, 1000
    hits = np.zeros(20)
    for _ in range(trials):
        hits[np.isin(g.edge_keys(), dropedge(g, r, rng).edge_keys())] += 1
    sigma = math.sqrt(trials * r * (1 - r))
    assert (np.abs(hits - trials * (1 - r)) <= 3 * sigma + 1).all()


def test_dropedge_removes_shrunken_hyperedges():
    h = build_hypergraph([{0, 1}], 2)
    rng = np.random.default_rng(0)
    sizes = {dropedge(h, 0.5, rng).num_hyperedges for _ in range(50)}
    assert sizes == {0, 1}
    for _ in range(20):
        out = dropedge(build_hypergraph([{0, 1, 2, 3}, {1, 2}], 4), 0.4, rng)
        assert all(len(e) >= 2 for e in out.hyperedges)


def test_augment_views():
    rng = np.random.default_rng(0)
    g = BipartiteGraph.from_pairs(50, 50, [(q, i) for q in range(50) for i in range(50) if (q + i) % 3 == 0])
    h = build_hypergraph([{i, i + 1, i + 2} for i in range(0, 45, 3)], 50)
    qf = rng.normal(size=(50, 32))
    same = augment(g, h, qf, 0.0, 0.0, rng)
    for v in (same.view_i, same.view_j):
        np.testing.assert_array_equal(v.bipartite.edges, g.edges)
        np.testing.assert_array_equal(v.query_features, qf)
    p = augment(g, h, qf, 0.2, 0.2, rng)
    n = g.num_edges
    for v in (p.view_i, p.view_j):
        assert abs(v.bipartite.num_edges - 0.8 * n) <= 4 * math.sqrt(n * 0.16)
    mi = (p.view_i.query_features == 0).all(axis=0)
    mj = (p.view_j.query_features == 0).all(axis=0)
    assert not np.array_equal(mi, mj)


def test_corrupt_changes_one_side():
    pos = np.array([[1, 2], [3, 4]])
    neg = corrupt(pos, 5, 10, 10, np.random.default_rng(0))
    assert neg.shape == (10, 2)
    rep = np.repeat(pos, 5, axis=0)
    assert ((neg[:, 0] == rep[:, 0]) | (neg[:, 1] == rep[:, 1])).all()


# --- optimizer ---------------------------------------------------------------------


def test_adam_step_decreases_quadratic():
    x = {"w": np.array([[1.0, -2.0]])}
    loss = lambda w: float((w ** 2).sum())  # noqa: E731
    before = loss(x["w"])
    Adam(1e-3).step(x, {"w": 2 * x["w"]})
    assert loss(x["w"]) < before


def test_adam_zero_lr_is_noop():
    x = {"w": np.array([[1.0]])}
    Adam(0.0).step(x, {"w": np.array([[3.0]])})
    assert x["w"][0, 0] == 1.0


# --- loops ----------------------------------------------------------------------------


@pytest.fixture(scope="module")
def small():
    spec = GenSpec(num_queries=2000, num_items=1000, num_edges=2000, num_sessions=200, num_topics=4, seed=1)
    ds = generate(spec)
    proto = split_four_parts(ds.bipartite, ds.hypergraph, np.random.default_rng(0), train_on_excluded=True)
    return ds, proto


def _model(ds, mode="dcah", d=16, seed=0):
    qf = query_features(ds, d)
    return DcahModel.init(ModelConfig(ds.bipartite.num_queries, ds.bipartite.num_items, hidden_dim=d, mode=mode),
                          qf, np.random.default_rng(seed))


def test_zero_epochs_leave_params(small):
    ds, proto = small
    m = _model(ds)
    before = {k: v.copy() for k, v in m.params.items()}
    pretrain_ssl(m, proto.train_graph(), ds.hypergraph, TrainConfig(ssl_epochs=0), np.random.default_rng(0))
    train_link_prediction(m, ds.hypergraph, proto, TrainConfig(train_epochs=0), np.random.default_rng(0))
    for k in before:
        np.testing.assert_array_equal(before[k], m.params[k])


def test_lr_zero_leaves_params(small):
    ds, proto = small
    m = _model(ds)
    before = {k: v.copy() for k, v in m.params.items()}
    train_link_prediction(m, ds.hypergraph, proto, TrainConfig(lr=0.0, train_epochs=3, batch_size=64),
                          np.random.default_rng(0))
    for k in before:
        np.testing.assert_array_equal(before[k], m.params[k])


def test_training_loss_decreases(small):
    ds, proto = small
    m = _model(ds)
    rows = []
    train_link_prediction(m, ds.hypergraph, proto, TrainConfig(train_epochs=20, batch_size=64, lr=1e-2),
                          np.random.default_rng(0), rows)
    losses = [r["loss"] for r in rows]
    assert len(losses) == 20 and losses[-1] < losses[0]


@pytest.mark.parametrize("mode", ["dcah", "gcn_only", "hyper_only"])
def test_ssl_loss_decreases(mode):
    spec = GenSpec(num_queries=100, num_items=100, num_edges=500, num_sessions=60, num_topics=5, seed=2)
    ds = generate(spec)
    m = _model(ds, mode)
    rows = []
    pretrain_ssl(m, ds.bipartite, ds.hypergraph, TrainConfig(ssl_epochs=50, batch_size=64, lr=1e-2),
                 np.random.default_rng(0), rows)
    first, last = np.mean([r["loss"] for r in rows[:5]]), np.mean([r["loss"] for r in rows[-5:]])
    assert last < first


def test_training_is_reproducible(small, tmp_path):
    ds, proto = small
    logs = []
    for _ in range(2):
        m = _model(ds)
        rows = []
        cfg = TrainConfig(ssl_epochs=3, train_epochs=3, batch_size=64, dropedge_rate=0.2)
        pretrain_ssl(m, proto.train_graph(), ds.hypergraph, cfg, np.random.default_rng(5), rows)
        train_link_prediction(m, ds.hypergraph, proto, cfg, np.random.default_rng(6), rows)
        path = tmp_path / f"log{len(logs)}.csv"
        write_log(path, rows)
        logs.append((path.read_bytes(), {k: v.copy() for k, v in m.params.items()}))
    assert logs[0][0] == logs[1][0]
    for k in logs[0][1]:
        assert np.array_equal(logs[0][1][k], logs[1][1][k])


def test_pretrain_precedes_training_in_log(small):
    ds, proto = small
    m = _model(ds)
    rows = []
    cfg = TrainConfig(ssl_epochs=2, train_epochs=2, batch_size=64)
    pretrain_ssl(m, proto.train_graph(), ds.hypergraph, cfg, np.random.default_rng(0), rows)
    train_link_prediction(m, ds.hypergraph, proto, cfg, np.random.default_rng(0), rows)
    assert [r["stage"] for r in rows] == ["pretrain", "pretrain", "train", "train"]


def test_nan_loss_aborts(small):
    ds, proto = small
    m = _model(ds)
    m.params["item_bg"][:] = np.nan
    with pytest.raises(NumericalError):
        train_link_prediction(m, ds.hypergraph, proto, TrainConfig(train_epochs=1, batch_size=64),
                              np.random.default_rng(0))


def test_empty_train_split_rejected(small):
    ds, proto = small
    from dataclasses import replace

    from dcah.graph import GraphInputError

    empty = replace(proto, train=np.zeros((0, 2), dtype=np.int64))
    with pytest.raises(GraphInputError):
        train_link_prediction(_model(ds), ds.hypergraph, empty, TrainConfig(train_epochs=1), np.random.default_rng(0))
