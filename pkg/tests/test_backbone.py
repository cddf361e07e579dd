import numpy as np
import pytest

from stprompt.backbone import (BackboneConfig, BackboneModel, curriculum_horizon, dilated_inception, learn_graph,
                               mixhop_propagate, node_partition, pretrain_loss, split_channels, sym_normalize_t,
                               tiny_grad_check)
from stprompt.diffengine import Tensor, ops
from stprompt.errors import ConfigError
from stprompt.graph import sym_normalize

from conftest import TINY


def test_identical_embeddings_give_empty_graph(rng):
    E = rng.normal(size=(5, 3))
    th = rng.normal(size=(3, 3))
    assert np.all(learn_graph(Tensor(E), Tensor(E), Tensor(th), Tensor(th), 3.0).data == 0)


def test_learned_graph_is_one_directional(rng):
    A = learn_graph(*(Tensor(rng.normal(size=s)) for s in [(6, 3), (6, 3), (3, 3), (3, 3)]), 3.0).data
    assert np.all(A * A.T == 0) and np.all(A >= 0)
    assert A.any()


def test_learned_graph_three_nodes_by_hand(rng):
    E1, E2 = rng.normal(size=(3, 2)), rng.normal(size=(3, 2))
    t1, t2 = rng.normal(size=(2, 2)), rng.normal(size=(2, 2))
    alpha = 2.0
    M1, M2 = np.tanh(alpha * E1 @ t1), np.tanh(alpha * E2 @ t2)
    expect = np.zeros((3, 3))
    for i in range(3):
        for j in range(3):
            a = sum(M1[i, c] * M2[j, c] - M2[i, c] * M1[j, c] for c in range(2))
            expect[i, j] = max(np.tanh(alpha * a), 0.0)
    got = learn_graph(Tensor(E1), Tensor(E2), Tensor(t1), Tensor(t2), alpha).data
    np.testing.assert_allclose(got, expect, atol=1e-12)
    kept = learn_graph(Tensor(E1), Tensor(E2), Tensor(t1), Tensor(t2), alpha, k=1).data
    assert np.all((kept > 0).sum(axis=1) <= 1)


def test_differentiable_normalisation_matches_numpy(rng):
    A = np.abs(rng.normal(size=(5, 5)))
    np.testing.assert_allclose(sym_normalize_t(Tensor(A)).data, sym_normalize(A), atol=1e-12)


def layer_norm_np(h, eps=1e-5):
    mu = h.mean(axis=-1, keepdims=True)
    return (h - mu) / np.sqrt(h.var(axis=-1, keepdims=True) + eps)


def test_mixhop_full_retain_collapses(rng):
    h = rng.normal(size=(2, 3, 5, 4))
    A = rng.uniform(size=(3, 3))
    Ws = [rng.normal(size=(4, 4)) for _ in range(3)]
    out = mixhop_propagate(Tensor(h), A, 1.0, [Tensor(W) for W in Ws]).data
    np.testing.assert_allclose(out, sum(h @ W for W in Ws) + layer_norm_np(h), atol=1e-9)
    zero_hops = mixhop_propagate(Tensor(h), A, 0.3, [Tensor(Ws[0])]).data
    np.testing.assert_allclose(zero_hops, h @ Ws[0] + layer_norm_np(h), atol=1e-9)


def test_mixhop_two_node_recursion(rng):
    h = rng.normal(size=(1, 2, 1, 3))
    A = sym_normalize(np.array([[0.0, 1.0], [1.0, 0.0]]))
    beta = 0.5
    I = np.eye(3)
    out = mixhop_propagate(Tensor(h), A, beta, [Tensor(I)] * 3).data
    x = h[0, :, 0]
    h1 = beta * x + (1 - beta) * A @ x
    h2 = beta * x + (1 - beta) * A @ h1
    np.testing.assert_allclose(out[0, :, 0], x + h1 + h2 + layer_norm_np(x), atol=1e-12)


def test_inception_zero_input_and_too_short(rng):
    w = {2: Tensor(rng.normal(size=(2, 3, 2))), 7: Tensor(rng.normal(size=(7, 3, 2)))}
    z = Tensor(np.zeros((1, 2, 13, 3)))
    a = dilated_inception(z, w, 0)
    out = ops.mul(ops.tanh(a), ops.sigmoid(a)).data
    assert np.all(out == 0)
    with pytest.raises(ValueError, match="too short"):
        dilated_inception(Tensor(np.zeros((1, 2, 5, 3))), w, 1)


def test_single_branch_inception_is_plain_conv(rng):
    x = rng.normal(size=(1, 2, 10, 1))
    w = np.array([[[1.0]], [[1.0]]])
    got = dilated_inception(Tensor(x), {2: Tensor(w)}, 0).data
    ref = ops.causal_dilated_conv1d(Tensor(x), Tensor(w), dilation=1).data
    np.testing.assert_array_equal(got, ref)


def test_forward_shape_and_zero_path():
    model = BackboneModel(BackboneConfig(n_nodes=4), seed=0)
    x = np.random.default_rng(0).normal(size=(1, 4, 12, 1))
    assert model.forward(x).shape == (1, 4, 12, 1)
    assert np.all(model.forward(np.zeros((1, 4, 12, 1))).data == 0)
    with pytest.raises(ValueError):
        model.forward(np.zeros((1, 3, 12, 1)))


def test_static_graph_mode():
    with pytest.raises(ConfigError):
        BackboneModel(BackboneConfig(n_nodes=3, learn_graph=False))
    model = BackboneModel(BackboneConfig(n_nodes=3, learn_graph=False), static_adjacency=np.ones((3, 3)))
    assert not any(n.startswith("graph.") for n in model.params.names())
    assert model.forward(np.ones((2, 3, 12, 1))).shape == (2, 3, 12, 1)


def test_pretrain_loss_cases():
    y = np.ones((1, 2, 3, 1))
    assert pretrain_loss(Tensor(y), y).item() == 0
    assert pretrain_loss(Tensor(y + 1), y).item() == 1
    assert pretrain_loss(Tensor(y), y, [Tensor(np.array(3.0))], lam=1.0).item() == 3
    A = Tensor(np.array([[0.0, 3.0], [4.0, 0.0]]))
    assert pretrain_loss(Tensor(y), y, mu=2.0, A=A).item() == 10


def test_curriculum_schedule():
    assert curriculum_horizon(0, 100, 12) == 1
    assert curriculum_horizon(100, 100, 12) == 12
    assert curriculum_horizon(50, 100, 12) == 3
    qs = [curriculum_horizon(t, 100, 12) for t in range(101)]
    assert qs == sorted(qs)


def test_node_partition():
    assert [p.tolist() for p in node_partition(4, 1)] == [[0, 1, 2, 3]]
    parts = node_partition(4, 2, seed=3)
    assert [len(p) for p in parts] == [2, 2]
    assert sorted(np.concatenate(parts).tolist()) == [0, 1, 2, 3]
    assert sorted(len(p) for p in node_partition(5, 2)) == [2, 3]


def test_channel_split():
    assert split_channels(16, (2, 3, 6, 7)) == [4, 4, 4, 4]
    assert split_channels(10, (2, 3, 6, 7)) == [3, 3, 2, 2]


def test_partitioned_forward_uses_subgraph(rng):
    model = BackboneModel(BackboneConfig(**TINY), seed=1)
    idx = np.array([0, 2])
    y = model.forward(rng.normal(size=(2, 2, 12, 1)), node_idx=idx)
    assert y.shape == (2, 2, 12, 1)


def test_full_model_gradients_match_finite_differences():
    rep = tiny_grad_check(seed=0, max_coords=8)
    assert rep.max_rel_error < 1e-4
    assert len(rep.kinks) < 0.1 * rep.n_checked
