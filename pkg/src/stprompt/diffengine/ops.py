"""Forward ops and their backward rules.

Arguments may be Tensors, numpy arrays or Python scalars; only Tensor
arguments receive gradients.  Python scalars stay Python scalars so that
float32 graphs are not promoted to float64.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .tensor import Tensor, make_node

__all__ = [
    "add", "sub", "mul", "div", "power", "matmul", "linear", "sum", "mean", "reshape",
    "transpose", "index", "concat", "pad", "relu", "tanh", "sigmoid", "abs", "sqrt", "exp",
    "dropout", "causal_dilated_conv1d", "batch_norm_1d", "BatchNormState", "layer_norm",
    "node_mix", "l1_loss", "l2_norm", "frobenius_norm",
]


def _val(x):
    if isinstance(x, Tensor):
        return x.data
    if isinstance(x, (int, float)):
        return x
    return np.asarray(x)


def _wants(x) -> bool:
    return isinstance(x, Tensor) and x.requires_grad


def _tensors(*xs) -> list[Tensor]:
    return [x for x in xs if isinstance(x, Tensor)]


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


def _binary(a, b, out, grad_a, grad_b, op):
    parents = _tensors(a, b)

    def backward(g):
        grads = []
        if isinstance(a, Tensor):
            grads.append(_unbroadcast(grad_a(g), a.shape) if a.requires_grad else None)
        if isinstance(b, Tensor):
            grads.append(_unbroadcast(grad_b(g), b.shape) if b.requires_grad else None)
        return grads

    return make_node(out, parents, backward, op)


# -- elementwise arithmetic ----------------------------------------------

def add(a, b) -> Tensor:
    return _binary(a, b, _val(a) + _val(b), lambda g: g, lambda g: g, "add")


def sub(a, b) -> Tensor:
    return _binary(a, b, _val(a) - _val(b), lambda g: g, lambda g: -g, "sub")


def mul(a, b) -> Tensor:
    av, bv = _val(a), _val(b)
    return _binary(a, b, av * bv, lambda g: g * bv, lambda g: g * av, "mul")


def div(a, b) -> Tensor:
    av, bv = _val(a), _val(b)
    # a zero divisor surfaces as NonFiniteError, not as a numpy warning
    with np.errstate(divide="ignore", invalid="ignore"):
        out = av / bv
    return _binary(a, b, out, lambda g: g / bv, lambda g: -g * av / (bv * bv), "div")


def power(x: Tensor, exponent: float) -> Tensor:
    xv = x.data
    out = xv ** exponent
    return make_node(out, [x], lambda g: [g * exponent * xv ** (exponent - 1)], "power")


def exp(x: Tensor) -> Tensor:
    out = np.exp(x.data)
    return make_node(out, [x], lambda g: [g * out], "exp")


def sqrt(x: Tensor) -> Tensor:
    out = np.sqrt(x.data)

    def backward(g):
        safe = np.where(out > 0, out, 1.0)
        return [np.where(out > 0, 0.5 * g / safe, 0.0)]

    return make_node(out, [x], backward, "sqrt")


def abs(x: Tensor) -> Tensor:  # noqa: A001 - mirrors numpy naming
    xv = x.data
    return make_node(np.abs(xv), [x], lambda g: [g * np.sign(xv)], "abs")


# -- activations ----------------------------------------------------------

def relu(x: Tensor) -> Tensor:
    xv = x.data
    return make_node(np.maximum(xv, 0), [x], lambda g: [g * (xv > 0)], "relu")


def tanh(x: Tensor) -> Tensor:
    out = np.tanh(x.data)
    return make_node(out, [x], lambda g: [g * (1 - out * out)], "tanh")


def sigmoid(x: Tensor) -> Tensor:
    # tanh form never overflows for large |x|
    out = 0.5 * (1 + np.tanh(0.5 * x.data))
    return make_node(out, [x], lambda g: [g * out * (1 - out)], "sigmoid")


def dropout(x: Tensor, rate: float, train_mode: bool, rng: np.random.Generator | int | None = None) -> Tensor:
    """Inverted dropout: survivors are scaled by 1/(1-rate) so eval mode is the identity."""
    if not 0 <= rate < 1:
        raise ValueError(f"dropout rate must lie in [0, 1), got {rate}")
    if not train_mode or rate == 0:
        return x
    rng = rng if isinstance(rng, np.random.Generator) else np.random.default_rng(rng)
    keep = (rng.random(x.shape) >= rate).astype(x.dtype) / (1 - rate)
    return make_node(x.data * keep, [x], lambda g: [g * keep], "dropout")


# -- linear algebra -----------------------------------------------------

def matmul(a, b) -> Tensor:
    av, bv = _val(a), _val(b)
    if np.ndim(av) < 2 or np.ndim(bv) < 2:
        raise ValueError("matmul operands need at least two dimensions")
    if av.shape[-1] != bv.shape[-2]:
        raise ValueError(f"matmul shape mismatch: {av.shape} @ {bv.shape}")
    return _binary(
        a, b, av @ bv,
        lambda g: g @ np.swapaxes(bv, -1, -2),
        lambda g: np.swapaxes(av, -1, -2) @ g,
        "matmul",
    )


def linear(x: Tensor, weight, bias=None) -> Tensor:
    """x[..., i] @ W[i, o] (+ b[o]); flattens leading axes so the weight grad is one GEMM."""
    xv, wv = _val(x), _val(weight)
    if xv.shape[-1] != wv.shape[0]:
        raise ValueError(f"linear shape mismatch: {xv.shape} with weight {wv.shape}")
    lead = xv.shape[:-1]
    x2 = xv.reshape(-1, xv.shape[-1])
    out = (x2 @ wv).reshape(*lead, wv.shape[1])
    if bias is not None:
        out = out + _val(bias)
    parents = _tensors(x, weight, bias)

    def backward(g):
        g2 = g.reshape(-1, g.shape[-1])
        grads = []
        if isinstance(x, Tensor):
            grads.append((g2 @ wv.T).reshape(xv.shape) if x.requires_grad else None)
        if isinstance(weight, Tensor):
            grads.append(x2.T @ g2 if weight.requires_grad else None)
        if isinstance(bias, Tensor):
            grads.append(g2.sum(axis=0) if bias.requires_grad else None)
        return grads

    return make_node(out, parents, backward, "linear")


def node_mix(adjacency, h, axis: int = 1) -> Tensor:
    """Apply an R x R operator along the node axis of h: out[.., i, ..] = sum_j A[i, j] h[.., j, ..]."""
    av, hv = _val(adjacency), _val(h)
    axis = axis % hv.ndim
    if av.shape != (hv.shape[axis], hv.shape[axis]):
        raise ValueError(f"node_mix: operator {av.shape} does not match node axis of {hv.shape}")
    h0 = np.moveaxis(hv, axis, 0)
    rest = h0.shape[1:]
    h2 = h0.reshape(h0.shape[0], -1)
    out = np.moveaxis((av @ h2).reshape(av.shape[0], *rest), 0, axis)
    parents = _tensors(adjacency, h)

    def backward(g):
        g2 = np.moveaxis(g, axis, 0).reshape(g.shape[axis], -1)
        grads = []
        if isinstance(adjacency, Tensor):
            grads.append(g2 @ h2.T if adjacency.requires_grad else None)
        if isinstance(h, Tensor):
            gh = (av.T @ g2).reshape(av.shape[1], *rest)
            grads.append(np.moveaxis(gh, 0, axis) if h.requires_grad else None)
        return grads

    return make_node(out, parents, backward, "node_mix")


# -- shape ops ----------------------------------------------------------

def _norm_axes(axis, ndim):
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(a % ndim for a in axis)


def sum(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:  # noqa: A001
    shape = x.shape
    axes = _norm_axes(axis, x.ndim)
    out = np.sum(x.data, axis=axes, keepdims=keepdims)

    def backward(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return [np.broadcast_to(g, shape)]

    return make_node(np.asarray(out), [x], backward, "sum")


def mean(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    axes = _norm_axes(axis, x.ndim)
    count = int(np.prod([x.shape[a] for a in axes])) if axes else 1
    return mul(sum(x, axis=axes, keepdims=keepdims), 1.0 / count)


def reshape(x: Tensor, shape) -> Tensor:
    old = x.shape
    return make_node(x.data.reshape(shape), [x], lambda g: [g.reshape(old)], "reshape")


def transpose(x: Tensor, axes=None) -> Tensor:
    axes = tuple(reversed(range(x.ndim))) if axes is None else tuple(axes)
    inverse = tuple(np.argsort(axes))
    return make_node(np.transpose(x.data, axes), [x], lambda g: [np.transpose(g, inverse)], "transpose")


def index(x: Tensor, idx) -> Tensor:
    out = x.data[idx]
    advanced = any(isinstance(i, (list, np.ndarray)) for i in (idx if isinstance(idx, tuple) else (idx,)))

    def backward(g):
        gx = np.zeros_like(x.data)
        if advanced:
            np.add.at(gx, idx, g)
        else:
            gx[idx] = g
        return [gx]

    return make_node(np.array(out, copy=True), [x], backward, "index")


def concat(xs: Sequence, axis: int = -1) -> Tensor:
    vals = [_val(x) for x in xs]
    out = np.concatenate(vals, axis=axis)
    ax = axis % out.ndim
    bounds = np.cumsum([v.shape[ax] for v in vals])[:-1]
    parents = _tensors(*xs)
    is_tensor = [isinstance(x, Tensor) for x in xs]

    def backward(g):
        pieces = np.split(g, bounds, axis=ax)
        return [p for p, t in zip(pieces, is_tensor) if t]

    return make_node(out, parents, backward, "concat")


def pad(x: Tensor, widths: Sequence[tuple[int, int]]) -> Tensor:
    """Zero padding, numpy ``pad`` convention for widths."""
    widths = [tuple(w) for w in widths]
    out = np.pad(x.data, widths)
    crop = tuple(slice(lo, lo + n) for (lo, _), n in zip(widths, x.shape))
    return make_node(out, [x], lambda g: [g[crop]], "pad")


# -- temporal convolution ---------------------------------------------

def causal_dilated_conv1d(x, weight, dilation: int = 1, bias=None, padding: str = "causal") -> Tensor:
    """Dilated convolution along axis -2 of x[..., T, C].

    out[.., t, :] = sum_k w[k] * x[.., t - k*dilation, :], taps reaching before the
    sequence read zeros.  ``padding="causal"`` keeps length T, ``"valid"`` drops the
    first (K-1)*dilation outputs.  The weight layout selects the channel mixing:

    * ``(K,)``            one kernel shared by every channel
    * ``(K, C)``          depthwise, one kernel per channel
    * ``(K, C_in, C_out)`` full channel mixing
    """
    xv, wv = _val(x), _val(weight)
    if xv.ndim < 2:
        raise ValueError("conv input needs shape [..., T, C]")
    if dilation < 1:
        raise ValueError("dilation must be >= 1")
    K = wv.shape[0]
    span = (K - 1) * dilation
    C = xv.shape[-1]
    if wv.ndim == 2 and wv.shape[1] != C or wv.ndim == 3 and wv.shape[1] != C:
        raise ValueError(f"conv weight {wv.shape} does not match {C} input channels")
    if padding == "causal":
        xp = np.pad(xv, [(0, 0)] * (xv.ndim - 2) + [(span, 0), (0, 0)])
    elif padding == "valid":
        if xv.shape[-2] <= span:
            raise ValueError(f"valid conv needs length > {span}, got {xv.shape[-2]}")
        xp = xv
    else:
        raise ValueError(f"unknown padding {padding!r}")
    T_out = xp.shape[-2] - span
    offsets = [(K - 1 - k) * dilation for k in range(K)]

    cols = None
    if wv.ndim == 3:
        c_out = wv.shape[2]
        cols = np.concatenate([xp[..., o:o + T_out, :] for o in offsets], axis=-1)
        lead = cols.shape[:-1]
        cols2 = cols.reshape(-1, K * C)
        w2 = wv.reshape(K * C, c_out)
        out = (cols2 @ w2).reshape(*lead, c_out)
    else:
        out = wv[0] * xp[..., offsets[0]:offsets[0] + T_out, :]
        for k in range(1, K):
            o = offsets[k]
            out = out + wv[k] * xp[..., o:o + T_out, :]
    if bias is not None:
        out = out + _val(bias)
    parents = _tensors(x, weight, bias)

    def backward(g):
        grads = []
        gxp = None
        if _wants(x) or _wants(weight):
            if wv.ndim == 3:
                g2 = g.reshape(-1, g.shape[-1])
                if _wants(x):
                    gcols = (g2 @ w2.T).reshape(*g.shape[:-1], K * C)
                    gxp = np.zeros_like(xp)
                    for k, o in enumerate(offsets):
                        gxp[..., o:o + T_out, :] += gcols[..., k * C:(k + 1) * C]
                gw = (cols2.T @ g2).reshape(wv.shape) if _wants(weight) else None
            else:
                if _wants(x):
                    gxp = np.zeros_like(xp)
                    for k, o in enumerate(offsets):
                        gxp[..., o:o + T_out, :] += g * wv[k]
                gw = None
                if _wants(weight):
                    red = tuple(range(g.ndim - 1)) if wv.ndim == 2 else None
                    gw = np.stack([
                        np.sum(g * xp[..., o:o + T_out, :], axis=red) for o in offsets
                    ]).astype(wv.dtype, copy=False)
        if isinstance(x, Tensor):
            if gxp is None:
                grads.append(None)
            else:
                grads.append(gxp[..., span:, :] if padding == "causal" else gxp)
        if isinstance(weight, Tensor):
            grads.append(gw)
        if isinstance(bias, Tensor):
            grads.append(g.reshape(-1, g.shape[-1]).sum(axis=0) if bias.requires_grad else None)
        return grads

    return make_node(out, parents, backward, "causal_dilated_conv1d")


# -- normalisation --------------------------------------------------------

@dataclass
class BatchNormState:
    """Running statistics for ``batch_norm_1d`` (not trainable parameters)."""

    channels: int
    momentum: float = 0.1
    eps: float = 1e-5
    running_mean: np.ndarray = field(default=None)  # type: ignore[assignment]
    running_var: np.ndarray = field(default=None)  # type: ignore[assignment]

    def __post_init__(self):
        if self.running_mean is None:
            self.running_mean = np.zeros(self.channels)
        if self.running_var is None:
            self.running_var = np.ones(self.channels)


def batch_norm_1d(x: Tensor, gamma, beta, state: BatchNormState, train_mode: bool) -> Tensor:
    """Normalise the last (channel) axis over every other axis."""
    xv = x.data
    axes = tuple(range(xv.ndim - 1))
    n = int(np.prod([xv.shape[a] for a in axes]))
    if train_mode:
        mu = xv.mean(axis=axes)
        var = xv.var(axis=axes)
        m = state.momentum
        state.running_mean = (1 - m) * state.running_mean + m * mu
        state.running_var = (1 - m) * state.running_var + m * var * (n / max(n - 1, 1))
    else:
        mu = state.running_mean.astype(xv.dtype)
        var = state.running_var.astype(xv.dtype)
    invstd = 1.0 / np.sqrt(var + state.eps)
    xhat = (xv - mu) * invstd
    gv, bv = _val(gamma), _val(beta)
    out = xhat * gv + bv
    parents = _tensors(x, gamma, beta)

    def backward(g):
        grads = []
        if isinstance(x, Tensor):
            if not x.requires_grad:
                grads.append(None)
            elif train_mode:
                dxhat = g * gv
                s1 = dxhat.sum(axis=axes)
                s2 = (dxhat * xhat).sum(axis=axes)
                grads.append(invstd / n * (n * dxhat - s1 - xhat * s2))
            else:
                grads.append(g * gv * invstd)
        if isinstance(gamma, Tensor):
            grads.append((g * xhat).sum(axis=axes))
        if isinstance(beta, Tensor):
            grads.append(g.sum(axis=axes))
        return grads

    return make_node(out, parents, backward, "batch_norm_1d")


def layer_norm(x: Tensor, gamma=None, beta=None, eps: float = 1e-5) -> Tensor:
    """Normalise over the last axis, then apply optional gain and shift."""
    xv = x.data
    D = xv.shape[-1]
    mu = xv.mean(axis=-1, keepdims=True)
    var = xv.var(axis=-1, keepdims=True)
    invstd = 1.0 / np.sqrt(var + eps)
    xhat = (xv - mu) * invstd
    gv = 1.0 if gamma is None else _val(gamma)
    out = xhat * gv
    if beta is not None:
        out = out + _val(beta)
    parents = _tensors(x, gamma, beta)
    red = tuple(range(xv.ndim - 1))

    def backward(g):
        grads = []
        if isinstance(x, Tensor):
            if x.requires_grad:
                dxhat = g * gv
                s1 = dxhat.sum(axis=-1, keepdims=True)
                s2 = (dxhat * xhat).sum(axis=-1, keepdims=True)
                grads.append(invstd / D * (D * dxhat - s1 - xhat * s2))
            else:
                grads.append(None)
        if isinstance(gamma, Tensor):
            grads.append((g * xhat).sum(axis=red))
        if isinstance(beta, Tensor):
            grads.append(g.sum(axis=red))
        return grads

    return make_node(out.astype(xv.dtype, copy=False), parents, backward, "layer_norm")


# -- losses and norms -----------------------------------------------------

def l1_loss(pred: Tensor, target) -> Tensor:
    """Mean absolute error."""
    return mean(abs(sub(pred, target)))


def l2_norm(x: Tensor) -> Tensor:
    """Euclidean norm of all entries; the gradient at the origin is taken as zero."""
    xv = x.data
    norm = np.sqrt(np.sum(xv * xv))

    def backward(g):
        if norm == 0:
            return [np.zeros_like(xv)]
        return [g * xv / norm]

    return make_node(np.asarray(norm, dtype=xv.dtype), [x], backward, "l2_norm")


def frobenius_norm(x: Tensor) -> Tensor:
    if x.ndim != 2:
        raise ValueError(f"frobenius_norm expects a matrix, got shape {x.shape}")
    return l2_norm(x)
