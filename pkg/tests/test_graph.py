import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from dcah.graph import (
    BipartiteGraph,
    GraphInputError,
    Hypergraph,
    bipartite_operator,
    build_hypergraph,
    degree_vector,
    hypergraph_operator,
)
from oracles import dense_bipartite_operator, dense_hypergraph_operator, random_bipartite_edges, random_hyperedges


# --- construction ------------------------------------------------------------


def test_single_hyperedge():
    h = build_hypergraph([{0, 1, 2}], 3)
    np.testing.assert_array_equal(h.incidence().to_dense(), np.ones((3, 1)))
    np.testing.assert_array_equal(h.edge_degrees(), [3])
    np.testing.assert_array_equal(h.node_degrees(), [1, 1, 1])


def test_duplicate_records_kept():
    h = build_hypergraph([{0, 1}, {0, 1}], 2)
    np.testing.assert_array_equal(h.node_degrees(), [2, 2])
    np.testing.assert_array_equal(h.edge_degrees(), [2, 2])


def test_within_record_dedup():
    h = build_hypergraph([[5, 5, 6]], 7)
    assert h.hyperedges == ((5, 6),)
    np.testing.assert_array_equal(h.edge_degrees(), [2])


def test_singleton_records_dropped_and_empty_ok():
    assert build_hypergraph([[3], [4, 4]], 5).num_hyperedges == 0
    assert build_hypergraph([], 5).num_hyperedges == 0


def test_out_of_range_rejected():
    with pytest.raises(GraphInputError):
        build_hypergraph([[0, 9]], 5)
    with pytest.raises(GraphInputError):
        BipartiteGraph.from_pairs(2, 2, [(0, 2)])
    with pytest.raises(GraphInputError):
        BipartiteGraph.from_pairs(2, 2, [(-1, 0)])


def test_duplicate_bipartite_edge_rejected():
    with pytest.raises(GraphInputError):
        BipartiteGraph.from_pairs(2, 2, [(0, 1), (0, 1)])


def test_adjacency_symmetric_and_bipartite():
    rng = np.random.default_rng(1)
    g = BipartiteGraph.from_pairs(6, 7, random_bipartite_edges(rng, 6, 7, 0.4))
    a = g.adjacency().to_dense()
    np.testing.assert_array_equal(a, a.T)
    assert not a[:6, :6].any() and not a[6:, 6:].any()


def test_rebuild_is_idempotent():
    rng = np.random.default_rng(2)
    h = build_hypergraph(random_hyperedges(rng, 12, 9), 12)
    h2 = build_hypergraph(h.hyperedges, 12)
    np.testing.assert_array_equal(h.incidence().to_dense(), h2.incidence().to_dense())
    np.testing.assert_array_equal(h.node_degrees(), h2.node_degrees())
    np.testing.assert_array_equal(h.edge_degrees(), h2.edge_degrees())


# --- bipartite operator ----------------------------------------------------------


def test_single_edge_operator():
    op = bipartite_operator(BipartiteGraph.from_pairs(1, 1, [(0, 0)]))
    np.testing.assert_allclose(op.normalized.to_dense(), [[0.5, 0.5], [0.5, 0.5]], rtol=0, atol=1e-15)


def test_edgeless_operator_is_identity():
    op = bipartite_operator(BipartiteGraph.from_pairs(2, 3, []))
    np.testing.assert_array_equal(op.normalized.to_dense(), np.eye(5))


def test_star_operator():
    d = bipartite_operator(BipartiteGraph.from_pairs(1, 2, [(0, 0), (0, 1)])).normalized.to_dense()
    assert d[0, 0] == pytest.approx(1 / 3, abs=1e-15)
    assert d[1, 1] == pytest.approx(1 / 2, abs=1e-15)
    assert d[2, 2] == pytest.approx(1 / 2, abs=1e-15)
    assert d[0, 1] == pytest.approx(1 / math.sqrt(6), abs=1e-15)
    assert d[1, 2] == 0.0


@settings(max_examples=40, deadline=None)
@given(st.integers(1, 60), st.integers(1, 60), st.floats(0.0, 0.5), st.integers(0, 2**31 - 1))
def test_bipartite_operator_matches_dense_oracle(nq, ni, p, seed):
    rng = np.random.default_rng(seed)
    edges = random_bipartite_edges(rng, nq, ni, p)
    op = bipartite_operator(BipartiteGraph.from_pairs(nq, ni, edges)).normalized.to_dense()
    ref = dense_bipartite_operator(nq, ni, edges)
    assert np.max(np.abs(op - ref)) <= 1e-12
    np.testing.assert_allclose(op, op.T, rtol=0, atol=1e-12)
    assert (op >= 0).all()


# --- hypergraph operator ---------------------------------------------------------


def test_two_item_hyperedge_operator():
    d = hypergraph_operator(build_hypergraph([{0, 1}], 2)).normalized.to_dense()
    np.testing.assert_allclose(d, [[0.5, 0.5], [0.5, 0.5]], rtol=0, atol=1e-15)


def test_isolated_item_has_zero_row_and_column():
    d = hypergraph_operator(build_hypergraph([{0, 1}], 3)).normalized.to_dense()
    assert not d[2].any() and not d[:, 2].any()


def test_chain_hyperedges_match_oracle():
    h = build_hypergraph([{0, 1}, {1, 2}], 3)
    d = hypergraph_operator(h).normalized.to_dense()
    assert np.max(np.abs(d - dense_hypergraph_operator(3, h.hyperedges))) <= 1e-12


@settings(max_examples=40, deadline=None)
@given(st.integers(2, 120), st.integers(0, 40), st.integers(0, 2**31 - 1))
def test_hypergraph_operator_matches_dense_oracle(ni, m, seed):
    rng = np.random.default_rng(seed)
    hes = random_hyperedges(rng, ni, m)
    op = hypergraph_operator(build_hypergraph(hes, ni)).normalized.to_dense()
    ref = dense_hypergraph_operator(ni, hes)
    assert np.max(np.abs(op - ref)) <= 1e-12
    np.testing.assert_allclose(op, op.T, rtol=0, atol=1e-12)
    assert (op >= 0).all()
    # the similar random-walk matrix D^-1/2 op D^1/2 is row-stochastic on covered items
    dv = np.zeros(ni)
    for e in hes:
        dv[list(e)] += 1
    cov = dv > 0
    rw = op[np.ix_(cov, cov)] * np.sqrt(dv[cov])[None, :] / np.sqrt(dv[cov])[:, None]
    np.testing.assert_allclose(rw.sum(axis=1), 1.0, rtol=0, atol=1e-12)


def test_weighted_hypergraph_matches_oracle():
    rng = np.random.default_rng(5)
    hes = random_hyperedges(rng, 10, 6)
    w = rng.uniform(0.5, 2.0, size=6)
    op = hypergraph_operator(Hypergraph(10, tuple(hes), w)).normalized.to_dense()
    assert np.max(np.abs(op - dense_hypergraph_operator(10, hes, w))) <= 1e-12


@pytest.mark.parametrize("seed", range(5))
def test_hypergraph_spectral_radius_at_most_one(seed):
    rng = np.random.default_rng(seed)
    op = hypergraph_operator(build_hypergraph(random_hyperedges(rng, 30, 15), 30)).normalized
    v = rng.random((30, 1)) + 0.1
    lam = 0.0
    for _ in range(300):
        w = op.matmul(v)
        lam = float(np.linalg.norm(w))
        if lam == 0:
            break
        v = w / lam
    assert lam <= 1 + 1e-9


# --- degrees -------------------------------------------------------------------


def test_degree_vector_examples():
    g = BipartiteGraph.from_pairs(1, 1, [(0, 0)])
    np.testing.assert_array_equal(degree_vector(g, "query"), [1])
    np.testing.assert_array_equal(degree_vector(g, "item"), [1])
    np.testing.assert_array_equal(degree_vector(build_hypergraph([{0, 1, 2}], 3), "item"), [1, 1, 1])
    with pytest.raises(GraphInputError):
        degree_vector(build_hypergraph([], 3), "query")


def test_degree_vector_matches_counting_oracle():
    rng = np.random.default_rng(9)
    edges = random_bipartite_edges(rng, 20, 25, 0.2)
    g = BipartiteGraph.from_pairs(20, 25, edges)
    qd = [sum(1 for q, _ in edges if q == k) for k in range(20)]
    idg = [sum(1 for _, i in edges if i == k) for k in range(25)]
    np.testing.assert_array_equal(degree_vector(g, "query"), qd)
    np.testing.assert_array_equal(degree_vector(g, "item"), idg)
    np.testing.assert_array_equal(degree_vector(g, "node"), qd + idg)


def test_density():
    g = BipartiteGraph.from_pairs(2, 2, [(0, 0), (1, 1)])
    assert g.density() == pytest.approx(2 * 2 / (4 * 3))
