import numpy as np
import pytest

from stprompt.backbone import BackboneConfig, BackboneModel
from stprompt.diffengine import Tensor, count_params, ops
from stprompt.errors import ConfigError
from stprompt.prompt import (PromptConfig, PromptNet, SimpleEditor, edit_magnitude, lagged_windows,
                             simple_editor_forward, toy_phase_fit)


def relu(v):
    return max(v, 0.0)


def test_zero_output_layer_is_bitwise_identity(rng):
    net = PromptNet(PromptConfig(), seed=3)
    x = rng.normal(size=(5, 7, 12, 1)).astype(np.float32)
    assert np.array_equal(net.forward(x).data, x)
    assert edit_magnitude(net, x) == 0.0


def test_zero_input_zero_output():
    net = PromptNet(PromptConfig(zero_init_output=False), seed=1)
    assert np.all(net.forward(np.zeros((2, 12, 1))).data == 0)


def test_small_net_against_scalar_evaluation():
    cfg = PromptConfig(n_features=1, d_hidden=2, kernel=3, window=4, dropout=0.0, zero_init_output=False)
    net = PromptNet(cfg, seed=0, dtype=np.float64)
    W1 = np.array([[1.0], [-0.5]])
    W2 = np.array([0.5, -1.0, 2.0])
    b1 = np.array([0.1, 0.2])
    W3 = np.array([[1.0, 0.0], [0.5, 0.5], [0.0, 1.0], [-1.0, 2.0]])
    b2 = np.array([0.0, -0.3])
    W4 = np.array([[0.7, -0.2]])
    for name, val in dict(W1=W1, W2=W2, b1=b1, W3=W3, b2=b2, W4=W4).items():
        net.params[name].data = val
    x = np.array([1.0, -2.0, 0.5, 3.0])

    H = [[W1[c, 0] * x[t] for c in range(2)] for t in range(4)]
    # causal taps: output at time t reads t, t-1, t-2 with weights W2[0], W2[1], W2[2]
    Hc = [[relu(sum(W2[k] * H[t - k][c] for k in range(3)) + b1[c]) for c in range(2)] for t in (2, 3)]
    Hb = [[relu(sum(W3[t, j] * Hc[j][c] for j in range(2)) + b2[c]) for c in range(2)] for t in range(4)]
    expect = [sum(W4[0, c] * Hb[t][c] for c in range(2)) + x[t] for t in range(4)]

    out = net.forward(x.reshape(1, 4, 1)).data.ravel()
    np.testing.assert_allclose(out, expect, atol=1e-12)


def test_shape_checks():
    net = PromptNet(PromptConfig())
    with pytest.raises(ValueError):
        net.forward(np.zeros((2, 11, 1)))
    with pytest.raises(ConfigError):
        PromptConfig(kernel=13)
    with pytest.raises(ConfigError):
        PromptConfig(tcn_layers=3)


def test_parameter_shapes_and_budget():
    net = PromptNet(PromptConfig())
    shapes = {n: s for n, s, _ in net.describe()}
    assert shapes == {"W1": (32, 1), "W2": (7,), "b1": (32,), "W3": (12, 6), "b2": (32,), "W4": (1, 32)}
    assert net.n_params() == sum(int(np.prod(s)) for s in shapes.values()) == 207
    for R in (50, 207, 1000):
        backbone = BackboneModel(BackboneConfig(n_nodes=R), seed=0)
        assert net.n_params() / backbone.n_params() <= 0.02


def test_edit_magnitude_ratio():
    class Doubler:
        params = PromptNet(PromptConfig()).params

        def forward(self, x):
            return ops.mul(x, 2.0)

    x = np.arange(1.0, 13.0).reshape(1, 12, 1)
    assert edit_magnitude(Doubler(), x) == pytest.approx(1.0)


def test_gradients_reach_every_prompt_weight(rng):
    net = PromptNet(PromptConfig(zero_init_output=False, dropout=0.0), seed=2, dtype=np.float64)
    x = rng.normal(size=(3, 12, 1))
    loss = ops.l1_loss(net.forward(x), np.zeros_like(x))
    net.params.zero_grad()
    loss.backward()
    for name, t in net.params.items():
        assert t.grad is not None and np.any(t.grad != 0), name


def test_simple_editor_identity(rng):
    x = rng.normal(size=(2, 10, 3))
    H = Tensor(rng.normal(size=(2, 10, 4)))
    out = simple_editor_forward(x, np.zeros((3, 5)), rng.normal(size=(4, 5)), np.zeros(5), H)
    assert np.array_equal(out.data, x)
    ed = SimpleEditor(n_features=3, seed=0)
    assert np.array_equal(ed.forward(x).data, x)


def test_simple_editor_matches_formula(rng):
    x = rng.normal(size=(6, 2))
    H = rng.normal(size=(6, 4))
    U, W, b = rng.normal(size=(2, 3)), rng.normal(size=(4, 3)), rng.normal(size=3)
    out = simple_editor_forward(x, U, W, b, Tensor(H)).data
    np.testing.assert_allclose(out, x + np.maximum(H @ W + b, 0) @ U.T, atol=1e-12)


def test_lagged_windows_alignment():
    s = np.arange(20.0)
    xs, refs = lagged_windows(s, lag=2, window=5)
    assert xs[0, :, 0].tolist() == [0, 1, 2, 3, 4]
    assert refs[0, :, 0].tolist() == [2, 3, 4, 5, 6]


def sine(n=600, period=24):
    return np.sin(2 * np.pi * np.arange(n) / period)


def test_toy_fit_without_lag_keeps_identity():
    net = PromptNet(PromptConfig(), seed=0)
    res = toy_phase_fit(net, sine(), lag=0, steps=200)
    assert res.edit < 0.05


def test_toy_fit_corrects_small_lag():
    net = PromptNet(PromptConfig(), seed=0)
    res = toy_phase_fit(net, sine(), lag=2, steps=400)
    assert res.post_mae < 0.5 * res.pre_mae


def test_toy_fit_warns_past_kernel_span():
    with pytest.warns(UserWarning, match="exceeds"):
        toy_phase_fit(PromptNet(PromptConfig()), sine(), lag=20, steps=1)


def test_prompt_params_are_the_only_trainables():
    net = PromptNet(PromptConfig())
    assert count_params(net.params, trainable_only=True) == 207
