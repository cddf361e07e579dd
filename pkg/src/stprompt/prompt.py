"""Residual temporal prompt: a small network that adds a learned edit to each input window."""

from __future__ import annotations

import math
import warnings
from dataclasses import asdict, dataclass
from typing import Mapping

import numpy as np

from .diffengine import ParamStore, Tensor, count_params, no_grad
from .diffengine import ops
from .errors import ConfigError
from .pipeline.optim import make_optimizer


@dataclass
class PromptConfig:
    n_features: int = 1
    d_hidden: int = 32
    tcn_layers: int = 2
    mlp_layers: int = 2
    kernel: int = 7
    dropout: float = 0.1
    zero_init_output: bool = True
    window: int = 12

    def __post_init__(self):
        if self.tcn_layers != 2 or self.mlp_layers != 2:
            raise ConfigError("the prompt has exactly two temporal and two affine layers")
        if self.kernel < 1 or self.d_hidden < 1:
            raise ConfigError("kernel and d_hidden must be positive")
        if not 0 <= self.dropout < 1:
            raise ConfigError("dropout must lie in [0, 1)")
        if self.compressed < 1:
            raise ConfigError(f"kernel {self.kernel} leaves nothing of a {self.window}-step window")

    @property
    def compressed(self) -> int:
        """Window length after the valid convolution."""
        return self.window - (self.kernel - 1)

    def to_dict(self) -> dict:
        return asdict(self)


class PromptNet:
    """X~ = W4 relu(W3 relu(drop(W2 * (W1 X) + b1)) + b2) + X, per node and window.

    W1 lifts features to d_hidden, W2 is a valid temporal convolution shrinking
    the window to ``compressed`` steps, W3 maps that compressed axis back to the
    full window and W4 projects to the feature space.  With W4 = 0 the net is the
    identity.
    """

    def __init__(self, config: PromptConfig, seed: int = 0, dtype=np.float32):
        self.config = config
        self.params = ParamStore(seed, dtype)
        c = config
        rng = np.random.default_rng(seed)
        d, F, T, Tc = c.d_hidden, c.n_features, c.window, c.compressed
        p = self.params
        p.add("W1", rng.normal(scale=1 / math.sqrt(F), size=(d, F)))
        p.add("W2", rng.normal(scale=1 / math.sqrt(c.kernel), size=(c.kernel,)))
        p.add("b1", np.zeros(d))
        p.add("W3", rng.normal(scale=1 / math.sqrt(Tc), size=(T, Tc)))
        p.add("b2", np.zeros(d))
        W4 = np.zeros((F, d)) if c.zero_init_output else rng.normal(scale=1 / math.sqrt(d), size=(F, d))
        p.add("W4", W4)

    def n_params(self) -> int:
        return count_params(self.params)

    def forward(self, x, train_mode: bool = False, rng: np.random.Generator | int | None = None,
                params: Mapping[str, Tensor] | None = None) -> Tensor:
        """Apply the edit to (..., T, F) windows; any leading axes (batch, node) are carried along."""
        c = self.config
        P = self.params if params is None else params
        if not isinstance(x, Tensor):
            x = Tensor(np.asarray(x, dtype=self.params.dtype))
        if x.ndim < 2 or x.shape[-2] != c.window or x.shape[-1] != c.n_features:
            raise ValueError(f"prompt expects (..., {c.window}, {c.n_features}) windows, got {x.shape}")
        h = ops.linear(x, ops.transpose(P["W1"]))
        h = ops.causal_dilated_conv1d(h, P["W2"], dilation=1, bias=P["b1"], padding="valid")
        h = ops.relu(ops.dropout(h, c.dropout, train_mode, rng))
        h = ops.relu(ops.add(ops.matmul(P["W3"], h), P["b2"]))
        return ops.add(ops.linear(h, ops.transpose(P["W4"])), x)

    __call__ = forward

    def describe(self) -> list[tuple[str, tuple[int, ...], int]]:
        return [(n, t.shape, int(np.prod(t.shape))) for n, t in self.params.items()]


def edit_magnitude(net: PromptNet, x) -> float:
    """||X~ - X||_F / (||X||_F + 1e-12) in eval mode."""
    xv = np.asarray(x.data if isinstance(x, Tensor) else x, dtype=np.float64)
    with no_grad():
        out = net.forward(Tensor(xv.astype(net.params.dtype))).data.astype(np.float64)
    return float(np.linalg.norm(out - xv) / (np.linalg.norm(xv) + 1e-12))


class SimpleEditor:
    """Residual TCN block followed by a gated edit: X~ = X + U relu(W H + b).

    H = relu(BN(conv(X))) + X P, with a causal conv of ``kernel`` taps and a
    1x1 projection P on the skip path.
    """

    def __init__(self, n_features: int = 1, d_hidden: int = 16, d_edit: int = 8, kernel: int = 3,
                 seed: int = 0, dtype=np.float64, zero_init_output: bool = True):
        rng = np.random.default_rng(seed)
        self.params = p = ParamStore(seed, dtype)
        F, d = n_features, d_hidden
        p.add("conv", rng.normal(scale=1 / math.sqrt(kernel * F), size=(kernel, F, d)))
        p.add("bn_gamma", np.ones(d))
        p.add("bn_beta", np.zeros(d))
        p.add("proj", rng.normal(scale=1 / math.sqrt(F), size=(F, d)))
        p.add("W", rng.normal(scale=1 / math.sqrt(d), size=(d, d_edit)))
        p.add("b", np.zeros(d_edit))
        p.add("U", np.zeros((F, d_edit)) if zero_init_output else rng.normal(size=(F, d_edit)))
        self.bn = ops.BatchNormState(d)

    def tcn(self, x, train_mode: bool = False) -> Tensor:
        p = self.params
        h = ops.causal_dilated_conv1d(x, p["conv"])
        h = ops.relu(ops.batch_norm_1d(h, p["bn_gamma"], p["bn_beta"], self.bn, train_mode))
        return ops.add(h, ops.linear(x, p["proj"]))

    def forward(self, x, train_mode: bool = False) -> Tensor:
        p = self.params
        if not isinstance(x, Tensor):
            x = Tensor(np.asarray(x, dtype=p.dtype))
        return simple_editor_forward(x, p["U"], p["W"], p["b"], self.tcn(x, train_mode))


def simple_editor_forward(x, U, W, b, H) -> Tensor:
    """X + relu(H W + b) U^T, given TCN features H of shape (..., T, d)."""
    x, U, H = (t if isinstance(t, Tensor) else Tensor(np.asarray(t)) for t in (x, U, H))
    if U.shape[0] != x.shape[-1]:
        raise ValueError(f"U has {U.shape[0]} rows, input has {x.shape[-1]} features")
    z = ops.relu(ops.linear(H, W, b))
    return ops.add(ops.linear(z, ops.transpose(U)), x)


# -- toy phase correction ----------------------------------------------------

@dataclass
class ToyFitResult:
    pre_mae: float
    post_mae: float
    edit: float
    steps: int


def lagged_windows(series: np.ndarray, lag: int, window: int) -> tuple[np.ndarray, np.ndarray]:
    """(inputs, references) of shape (N, window, 1): inputs read the series delayed by ``lag``."""
    series = np.asarray(series, dtype=np.float64)
    n = len(series) - lag - window + 1
    if n < 1:
        raise ValueError("series too short for the requested lag and window")
    idx = lag + np.arange(n)[:, None] + np.arange(window)
    return series[idx - lag][..., None], series[idx][..., None]


def toy_phase_fit(net: PromptNet, series: np.ndarray, lag: int, steps: int = 300, lr: float = 1e-2,
                  batch_size: int = 32, seed: int = 0, optimizer: str = "adam") -> ToyFitResult:
    """Tune ``net`` so that edited lagged windows match the unlagged series.

    Warns when the lag exceeds the convolution span, where the correction is
    expected to break down.
    """

    if lag > net.config.kernel:
        warnings.warn(f"lag {lag} exceeds the prompt kernel span {net.config.kernel}", stacklevel=2)
    xs, refs = lagged_windows(series, lag, net.config.window)
    xs = xs.astype(net.params.dtype)

    def mae() -> float:
        with no_grad():
            return float(np.mean(np.abs(net.forward(xs).data - refs)))

    pre = mae()
    opt = make_optimizer(optimizer, net.params, lr)
    rng = np.random.default_rng(seed)
    for step in range(steps):
        b = rng.choice(len(xs), size=min(batch_size, len(xs)), replace=False)
        loss = ops.l1_loss(net.forward(xs[b], train_mode=True, rng=rng), refs[b])
        opt.zero_grad()
        loss.backward()
        opt.step()
    return ToyFitResult(pre, mae(), edit_magnitude(net, xs), steps)
