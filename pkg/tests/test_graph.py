import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from stprompt.graph import (SensorGraph, kernel_adjacency, poly_filter, random_walk, read_adjacency, sym_normalize,
                            topk_mask, topk_sparsify, write_adjacency)

weights = arrays(np.float64, st.tuples(st.integers(1, 6)).map(lambda s: (s[0], s[0])),
                 elements=st.floats(0, 10, allow_nan=False))


def test_kernel_weight_at_sigma_distance():
    g = kernel_adjacency([(0, 1, 5.0)], sigma2=25.0, n=2)
    assert g.adjacency[0, 1] == pytest.approx(np.exp(-1))
    assert g.adjacency[1, 0] == 0


def test_kernel_by_identifier_and_unknown_node():
    g = kernel_adjacency([("a", "b", 0.0)], node_ids=["a", "b", "c"])
    assert g.adjacency[0, 1] == 1.0 and g.n == 3
    with pytest.raises(Exception):
        kernel_adjacency([("a", "z", 1.0)], node_ids=["a", "b"])


def test_random_walk_rows():
    g = SensorGraph(np.array([[0.0, 2.0, 2.0], [0, 0, 0], [1, 0, 0]]))
    S = random_walk(g).S
    np.testing.assert_allclose(S[0], [0, 0.5, 0.5])
    assert np.all(S[1] == 0)


def test_poly_filter_on_single_edge():
    g = SensorGraph(np.array([[0.0, 1.0], [0.0, 0.0]]))
    X = np.array([[1.0], [3.0]])
    op = random_walk(g)
    np.testing.assert_allclose(poly_filter(op, [1.0], X), X)
    # S X moves node 1's signal onto node 0
    np.testing.assert_allclose(poly_filter(op, [0.0, 1.0], X), [[3.0], [0.0]])
    np.testing.assert_allclose(poly_filter(op, [2.0, 1.0], X), [[5.0], [6.0]])


def test_power_cache_bound():
    op = random_walk(SensorGraph.empty(3), max_hops=2)
    assert np.array_equal(op.power(0), np.eye(3))
    with pytest.raises(ValueError):
        op.power(3)


@settings(max_examples=50, deadline=None)
@given(weights, st.integers(0, 10_000))
def test_poly_filter_is_linear_and_matches_powers(A, seed):
    rng = np.random.default_rng(seed)
    n = A.shape[0]
    op = random_walk(SensorGraph(A))
    a = rng.normal(size=3)
    X, Y = rng.normal(size=(n, 2)), rng.normal(size=(n, 2))
    lhs = poly_filter(op, a, 2 * X - Y)
    np.testing.assert_allclose(lhs, 2 * poly_filter(op, a, X) - poly_filter(op, a, Y), atol=1e-9)
    S = op.S
    dense = a[0] * X + a[1] * S @ X + a[2] * np.linalg.matrix_power(S, 2) @ X
    np.testing.assert_allclose(poly_filter(op, a, X), dense, atol=1e-9)


@settings(max_examples=50, deadline=None)
@given(weights)
def test_random_walk_is_row_stochastic(A):
    S = random_walk(SensorGraph(A)).S
    sums = S.sum(axis=1)
    has_out = A.sum(axis=1) > 0
    np.testing.assert_allclose(sums[has_out], 1.0, atol=1e-12)
    assert np.all(sums[~has_out] == 0)


def test_sym_normalize_small_cases():
    np.testing.assert_allclose(sym_normalize(np.zeros((3, 3))), np.eye(3))
    np.testing.assert_allclose(sym_normalize(np.ones((2, 2))), np.full((2, 2), 0.5))
    np.testing.assert_allclose(sym_normalize(np.array([[0.0, 1.0], [1.0, 0.0]])), np.full((2, 2), 0.5))


@settings(max_examples=50, deadline=None)
@given(weights)
def test_sym_normalize_of_symmetric_input(A):
    A = A + A.T
    N = sym_normalize(A)
    np.testing.assert_allclose(N, N.T, atol=1e-12)
    eig = np.linalg.eigvalsh(N)
    assert eig.max() <= 1 + 1e-9 and eig.min() >= -1 - 1e-9


def test_topk_examples():
    A = np.array([[0.5, 0.2, 0.9]])
    assert topk_mask(A, 2).tolist() == [[True, False, True]]
    assert topk_sparsify(A, 2).tolist() == [[0.5, 0.0, 0.9]]
    assert topk_mask(np.array([[1.0, 1.0, 1.0]]), 2).tolist() == [[True, True, False]]
    with pytest.raises(ValueError):
        topk_mask(A, 0)


@settings(max_examples=50, deadline=None)
@given(weights, st.data())
def test_topk_keeps_exactly_k(A, data):
    k = data.draw(st.integers(1, A.shape[1]))
    m = topk_mask(A, k)
    assert np.all(m.sum(axis=1) == k)
    kept_min = np.where(m, A, np.inf).min(axis=1)
    dropped_max = np.where(m, -np.inf, A).max(axis=1)
    assert np.all(kept_min >= dropped_max)


def test_graph_validation():
    with pytest.raises(ValueError):
        SensorGraph(np.zeros((2, 3)))
    with pytest.raises(ValueError):
        SensorGraph(np.array([[0.0, -1.0], [0.0, 0.0]]))


def test_adjacency_file_round_trip(tmp_path):
    ids = ("s1", "s2", "s3")
    g = kernel_adjacency([("s1", "s2", 1.3), ("s3", "s1", 7.1)], node_ids=ids)
    write_adjacency(g, tmp_path / "a.csv")
    back = read_adjacency(tmp_path / "a.csv", ids)
    assert np.array_equal(back.adjacency, g.adjacency)
    assert list(g.neighbors(0)) == [1, 2]
