import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from stprompt.diffengine import (CheckpointError, FrozenParameterError, GraphConsumedError, NonFiniteError, ParamStore,
                                 Tensor, check_registered, count_params, grad_check, inception_receptive_field,
                                 load_checkpoint, no_grad, ops, receptive_field, save_checkpoint)
from stprompt.diffengine.gradcheck import REGISTRY


def conv_oracle(x, w, dilation):
    """Direct sum out[t] = sum_k w[k] x[t - k d] with zeros before the start."""
    T = len(x)
    out = np.zeros(T)
    for t in range(T):
        for k, wk in enumerate(w):
            if t - k * dilation >= 0:
                out[t] += wk * x[t - k * dilation]
    return out


# -- forward values -----------------------------------------------------------

def test_relu_sign_cases():
    assert ops.relu(Tensor([-1.0, 0.0, 2.0])).data.tolist() == [0.0, 0.0, 2.0]


@pytest.mark.parametrize("dilation", [1, 2, 5])
def test_unit_kernel_conv_is_identity(dilation):
    x = np.arange(6.0).reshape(1, 6, 1)
    out = ops.causal_dilated_conv1d(Tensor(x), Tensor([1.0]), dilation=dilation)
    assert np.array_equal(out.data, x)


def test_two_tap_conv_matches_direct_sum():
    x = np.array([1.0, 2.0, 3.0])
    out = ops.causal_dilated_conv1d(Tensor(x.reshape(3, 1)), Tensor([1.0, 1.0]), dilation=1)
    assert out.data.ravel().tolist() == [1.0, 3.0, 5.0]


@settings(max_examples=40, deadline=None)
@given(st.integers(1, 4), st.integers(1, 3), st.integers(5, 14), st.integers(0, 10_000))
def test_shared_conv_matches_oracle(K, dilation, T, seed):
    rng = np.random.default_rng(seed)
    x = rng.normal(size=T)
    w = rng.normal(size=K)
    out = ops.causal_dilated_conv1d(Tensor(x.reshape(T, 1)), Tensor(w), dilation=dilation).data.ravel()
    np.testing.assert_allclose(out, conv_oracle(x, w, dilation), atol=1e-12)


def test_full_conv_matches_per_channel_oracle():
    rng = np.random.default_rng(3)
    x = rng.normal(size=(2, 10, 3))
    w = rng.normal(size=(3, 3, 4))
    out = ops.causal_dilated_conv1d(Tensor(x), Tensor(w), dilation=2).data
    expect = np.zeros((2, 10, 4))
    for b in range(2):
        for ci in range(3):
            for co in range(4):
                expect[b, :, co] += conv_oracle(x[b, :, ci], w[:, ci, co], 2)
    np.testing.assert_allclose(out, expect, atol=1e-12)


def test_valid_conv_drops_warmup_outputs():
    x = np.arange(1.0, 8.0).reshape(7, 1)
    out = ops.causal_dilated_conv1d(Tensor(x), Tensor([1.0, 1.0, 1.0]), padding="valid").data.ravel()
    assert out.tolist() == [6.0, 9.0, 12.0, 15.0, 18.0]


def test_conv_never_reads_the_future():
    x = Tensor(np.random.default_rng(0).normal(size=(1, 8, 2)), requires_grad=True)
    w = np.random.default_rng(1).normal(size=(3, 2, 2))
    out = ops.causal_dilated_conv1d(x, Tensor(w), dilation=2)
    for t in range(8):
        x.grad = None
        out2 = ops.causal_dilated_conv1d(x, Tensor(w), dilation=2)
        ops.sum(ops.index(out2, (slice(None), t))).backward()
        assert np.all(x.grad[:, t + 1:] == 0)
    assert out.shape == (1, 8, 2)


def test_losses_and_norms():
    assert ops.l1_loss(Tensor([1.0, 3.0]), np.array([0.0, 0.0])).item() == 2.0
    assert ops.l2_norm(Tensor([3.0, 4.0])).item() == 5.0
    assert ops.frobenius_norm(Tensor([[1.0, 2.0], [2.0, 4.0]])).item() == 5.0
    with pytest.raises(ValueError):
        ops.frobenius_norm(Tensor([1.0, 2.0]))


# -- backward -------------------------------------------------------------------

def test_square_gradient():
    x = Tensor(3.0, requires_grad=True)
    (x * x).backward()
    assert x.grad == 6.0


def test_relu_sum_gradient():
    x = Tensor([-1.0, 2.0], requires_grad=True)
    ops.sum(ops.relu(x)).backward()
    assert x.grad.tolist() == [0.0, 1.0]


def test_double_backward_is_an_error():
    x = Tensor([1.0, 2.0], requires_grad=True)
    loss = ops.sum(ops.mul(x, x))
    loss.backward()
    with pytest.raises(GraphConsumedError):
        loss.backward()


def test_non_finite_result_raises():
    with pytest.raises(NonFiniteError):
        ops.div(Tensor([1.0]), Tensor([0.0]))


def test_no_grad_records_nothing():
    x = Tensor([1.0, 2.0], requires_grad=True)
    with no_grad():
        y = ops.mul(x, 2.0)
    assert y.is_leaf and not y.requires_grad


def test_float32_graph_stays_float32():
    x = Tensor(np.ones(3, dtype=np.float32), requires_grad=True)
    y = ops.add(ops.mul(x, 0.5), 1.0)
    assert y.dtype == np.float32


def test_two_layer_net_against_finite_differences():
    rng = np.random.default_rng(0)
    x = rng.normal(size=(6, 4))
    y = rng.normal(size=(6, 2))

    def fn(W1, b1, W2):
        h = ops.tanh(ops.linear(Tensor(x), W1, b1))
        return ops.l1_loss(ops.matmul(h, W2), y)

    rep = grad_check(fn, [rng.normal(size=(4, 5)), rng.normal(size=(5,)), rng.normal(size=(5, 2))])
    assert rep.max_rel_error < 1e-4


# -- grad_check ------------------------------------------------------------------

def test_gradcheck_linear_is_exact():
    rng = np.random.default_rng(0)
    A = rng.normal(size=(3, 4))
    rep = grad_check(lambda v: ops.sum(ops.matmul(Tensor(A), ops.reshape(v, (4, 1)))), [rng.normal(size=(4,))])
    assert rep.max_rel_error < 1e-8


def test_gradcheck_tanh_composition():
    rep = grad_check(lambda v: ops.sum(ops.tanh(ops.mul(ops.tanh(v), 3.0))), [np.linspace(-2, 2, 9)])
    assert rep.max_rel_error < 1e-4


def test_relu_at_zero_is_flagged_not_failed():
    rep = grad_check(lambda v: ops.sum(ops.relu(v)), [np.array([0.0, 1.0, -1.0])])
    assert rep.passed()
    assert (0, (0,)) in rep.kinks


@pytest.mark.parametrize("name", sorted(REGISTRY))
def test_registered_op_gradients(name):
    rep = check_registered(points=20, names=[name])[name]
    assert rep.max_rel_error < 1e-4, rep
    assert not rep.kinks


def test_dropout_modes():
    x = Tensor(np.ones((100, 100)))
    assert ops.dropout(x, 0.3, False) is x or np.array_equal(ops.dropout(x, 0.3, False).data, x.data)
    a = ops.dropout(x, 0.3, True, np.random.default_rng(5)).data
    b = ops.dropout(x, 0.3, True, np.random.default_rng(5)).data
    assert np.array_equal(a, b)
    keep = (a != 0).mean()
    assert abs(keep - 0.7) < 3 * np.sqrt(0.7 * 0.3 / a.size)
    assert np.allclose(a[a != 0], 1 / 0.7)
    with pytest.raises(ValueError):
        ops.dropout(x, 1.0, True, 0)


def test_batch_norm_eval_uses_running_stats():
    state = ops.BatchNormState(2)
    x = Tensor(np.random.default_rng(0).normal(3.0, 2.0, size=(50, 4, 2)))
    ops.batch_norm_1d(x, np.ones(2), np.zeros(2), state, train_mode=True)
    e1 = ops.batch_norm_1d(x, np.ones(2), np.zeros(2), state, train_mode=False).data
    e2 = ops.batch_norm_1d(x, np.ones(2), np.zeros(2), state, train_mode=False).data
    assert np.array_equal(e1, e2)
    assert not np.allclose(state.running_mean, 0)


# -- receptive fields ----------------------------------------------------------------

def test_receptive_fields():
    assert receptive_field(2, (1, 2, 4)) == 8
    assert receptive_field(1, (1, 7, 30)) == 1
    assert inception_receptive_field(7, 2) == 22


# -- parameters and checkpoints ----------------------------------------------------

def test_count_params():
    assert count_params(ParamStore()) == 0
    s = ParamStore()
    s.add("W", np.zeros((32, 32)))
    assert count_params(s) == 1024
    s.add("b", np.zeros(3), frozen=True)
    assert count_params(s, trainable_only=True) == 1024


def test_freeze_is_one_way():
    s = ParamStore()
    s.add("W", np.ones(2))
    s.freeze()
    assert s.all_frozen and not s["W"].requires_grad
    with pytest.raises(FrozenParameterError):
        s.unfreeze()


def test_checkpoint_round_trip(tmp_path):
    s = ParamStore(seed=1)
    s.add("a", np.arange(6.0).reshape(2, 3))
    s.add("scalar", 2.5, frozen=True)
    path = save_checkpoint(s, tmp_path / "x.ckpt")
    back = load_checkpoint(path)
    assert back.digest() == s.digest()
    assert back.is_frozen("scalar") and not back.is_frozen("a")
    assert np.array_equal(back["a"].data, s["a"].data)


def test_checkpoint_rejects_truncation(tmp_path):
    s = ParamStore()
    s.add("a", np.ones(10))
    path = save_checkpoint(s, tmp_path / "x.ckpt")
    path.write_bytes(path.read_bytes()[:-4])
    with pytest.raises(CheckpointError):
        load_checkpoint(path)
    path.write_bytes(b"garbage\nEND\n")
    with pytest.raises(CheckpointError):
        load_checkpoint(path)
