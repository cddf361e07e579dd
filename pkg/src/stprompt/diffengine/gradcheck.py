"""Central finite-difference verification of backward rules."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from . import ops
from .tensor import Tensor, no_grad


@dataclass
class GradCheckReport:
    max_rel_error: float
    worst: tuple[int, tuple[int, ...]] | None
    n_checked: int
    kinks: list[tuple[int, tuple[int, ...]]] = field(default_factory=list)

    def passed(self, tol: float = 1e-4) -> bool:
        return self.max_rel_error < tol


def _coords(shape, limit, rng):
    size = int(np.prod(shape, dtype=np.int64))
    flat = np.arange(size) if limit is None or size <= limit else np.sort(rng.choice(size, limit, replace=False))
    return [np.unravel_index(i, shape) for i in flat]


def grad_check(
    fn: Callable[..., Tensor],
    inputs: Sequence[np.ndarray],
    eps: float = 1e-3,
    max_coords: int | None = None,
    seed: int = 0,
    kink_tol: float = 1e-2,
    step_tol: float = 1e-3,
    floor: float = 1e-6,
) -> GradCheckReport:
    """Compare backward against central differences of ``fn(*tensors)``.

    Inputs are promoted to float64.  Derivatives use the five-point central
    stencil at offsets +-eps, +-2 eps.  A coordinate whose one-sided differences
    disagree by more than ``kink_tol * max(1, |central|)``, or whose central
    differences at eps and 2 eps disagree by more than ``step_tol`` relative,
    sits near a kink; it is listed in ``kinks`` and left out of the error.
    """
    arrays = [np.array(a, dtype=np.float64) for a in inputs]
    tensors = [Tensor(a, requires_grad=True) for a in arrays]
    out = fn(*tensors)
    out.backward()
    analytic = [t.grad if t.grad is not None else np.zeros_like(t.data) for t in tensors]

    def f() -> float:
        with no_grad():
            return float(fn(*[Tensor(a) for a in arrays]).data)

    rng = np.random.default_rng(seed)
    f0 = f()
    worst, max_err, n, kinks = None, 0.0, 0, []
    for i, arr in enumerate(arrays):
        for idx in _coords(arr.shape, max_coords, rng):
            orig = arr[idx]
            fp, fm, fp2, fm2 = (_shifted(f, arr, idx, orig + s * eps) for s in (1, -1, 2, -2))
            # five-point central stencil: truncation error O(eps**4) instead of O(eps**2)
            central = (8 * (fp - fm) - (fp2 - fm2)) / (12 * eps)
            d1, d2 = (fp - fm) / (2 * eps), (fp2 - fm2) / (4 * eps)
            lopsided = abs((fp - f0) - (f0 - fm)) / eps > kink_tol * max(1.0, abs(central))
            # away from kinks the two step sizes agree to O(eps**2)
            unstable = abs(d1 - d2) > step_tol * max(abs(d1), abs(d2), floor)
            if lopsided or unstable:
                kinks.append((i, tuple(int(j) for j in idx)))
                continue
            a = float(analytic[i][idx])
            err = abs(a - central) / max(abs(a), abs(central), floor)
            n += 1
            if err >= max_err:
                max_err, worst = err, (i, tuple(int(j) for j in idx))
    return GradCheckReport(max_err, worst, n, kinks)


def _shifted(f, arr, idx, value):
    orig = arr[idx]
    arr[idx] = value
    try:
        return f()
    finally:
        arr[idx] = orig


def receptive_field(kernel: int, dilations: Sequence[int]) -> int:
    """Receptive field of stacked causal convs: 1 + sum (K-1)*d."""
    if kernel < 1 or not dilations:
        raise ValueError("need kernel >= 1 and at least one dilation")
    return 1 + sum((kernel - 1) * d for d in dilations)


def inception_receptive_field(max_kernel: int, layers: int) -> int:
    """Receptive field of ``layers`` dilated-inception blocks with dilation 2**l."""
    return 1 + max_kernel * (2 ** layers - 1)


# -- registry of op checks ------------------------------------------------

def _away_from_zero(x: np.ndarray, margin: float = 0.05) -> np.ndarray:
    return np.where(np.abs(x) < margin, np.sign(x + 1e-12) * (margin + np.abs(x)), x)


def _weights(x: np.ndarray) -> np.ndarray:
    # a fixed random projection turns any output into a scalar with a generic gradient
    return np.random.default_rng(1234).normal(size=x.shape)


def _scalarize(t: Tensor) -> Tensor:
    return ops.sum(ops.mul(t, _weights(t.data)))


def _bn_train(x, g, b):
    return ops.batch_norm_1d(x, g, b, ops.BatchNormState(x.shape[-1]), train_mode=True)


def _bn_eval(x, g, b):
    st = ops.BatchNormState(x.shape[-1])
    st.running_mean = np.linspace(-0.3, 0.3, x.shape[-1])
    st.running_var = np.linspace(0.5, 2.0, x.shape[-1])
    return ops.batch_norm_1d(x, g, b, st, train_mode=False)


def _dropout(x):
    return ops.dropout(x, 0.3, True, np.random.default_rng(7))


OpCase = tuple[Callable[..., Tensor], Callable[[np.random.Generator], list[np.ndarray]]]

REGISTRY: dict[str, OpCase] = {
    "add": (ops.add, lambda r: [r.normal(size=(3, 4)), r.normal(size=(4,))]),
    "sub": (ops.sub, lambda r: [r.normal(size=(3, 4)), r.normal(size=(3, 1))]),
    "mul": (ops.mul, lambda r: [r.normal(size=(3, 4)), r.normal(size=(3, 4))]),
    "div": (ops.div, lambda r: [r.normal(size=(3, 4)), r.uniform(0.5, 2.0, size=(3, 4))]),
    "power": (lambda x: ops.power(x, 3.0), lambda r: [r.normal(size=(5,))]),
    "exp": (ops.exp, lambda r: [r.normal(size=(5,))]),
    "sqrt": (ops.sqrt, lambda r: [r.uniform(0.5, 2.0, size=(5,))]),
    "abs": (ops.abs, lambda r: [_away_from_zero(r.normal(size=(6,)))]),
    "matmul": (ops.matmul, lambda r: [r.normal(size=(2, 3, 4)), r.normal(size=(4, 5))]),
    "linear": (ops.linear, lambda r: [r.normal(size=(2, 3, 4)), r.normal(size=(4, 5)), r.normal(size=(5,))]),
    "node_mix": (lambda a, h: ops.node_mix(a, h, axis=1), lambda r: [r.normal(size=(3, 3)), r.normal(size=(2, 3, 4, 2))]),
    "concat": (lambda a, b: ops.concat([a, b], axis=-1), lambda r: [r.normal(size=(2, 3)), r.normal(size=(2, 2))]),
    "pad": (lambda x: ops.pad(x, [(2, 0), (0, 1)]), lambda r: [r.normal(size=(3, 2))]),
    "index": (lambda x: ops.index(x, (slice(None), np.array([0, 2, 2]))), lambda r: [r.normal(size=(2, 3))]),
    "reshape": (lambda x: ops.reshape(x, (3, 4)), lambda r: [r.normal(size=(2, 6))]),
    "transpose": (lambda x: ops.transpose(x, (2, 0, 1)), lambda r: [r.normal(size=(2, 3, 4))]),
    "sum": (lambda x: ops.sum(x, axis=1, keepdims=True), lambda r: [r.normal(size=(3, 4))]),
    "mean": (lambda x: ops.mean(x, axis=(0, 2)), lambda r: [r.normal(size=(3, 4, 2))]),
    "relu": (ops.relu, lambda r: [_away_from_zero(r.normal(size=(8,)))]),
    "tanh": (ops.tanh, lambda r: [r.normal(size=(8,))]),
    "sigmoid": (ops.sigmoid, lambda r: [r.normal(size=(8,))]),
    "dropout": (_dropout, lambda r: [r.normal(size=(4, 5))]),
    "conv_shared": (
        lambda x, w, b: ops.causal_dilated_conv1d(x, w, dilation=2, bias=b),
        lambda r: [r.normal(size=(2, 9, 3)), r.normal(size=(3,)), r.normal(size=(3,))],
    ),
    "conv_depthwise_valid": (
        lambda x, w: ops.causal_dilated_conv1d(x, w, dilation=1, padding="valid"),
        lambda r: [r.normal(size=(2, 7, 3)), r.normal(size=(3, 3))],
    ),
    "conv_full": (
        lambda x, w, b: ops.causal_dilated_conv1d(x, w, dilation=2, bias=b),
        lambda r: [r.normal(size=(2, 8, 3)), r.normal(size=(2, 3, 4)), r.normal(size=(4,))],
    ),
    "batch_norm_train": (_bn_train, lambda r: [r.normal(size=(4, 5, 3)), r.normal(size=(3,)), r.normal(size=(3,))]),
    "batch_norm_eval": (_bn_eval, lambda r: [r.normal(size=(4, 5, 3)), r.normal(size=(3,)), r.normal(size=(3,))]),
    "layer_norm": (ops.layer_norm, lambda r: [r.normal(size=(3, 5)), r.normal(size=(5,)), r.normal(size=(5,))]),
    "l1_loss": (lambda p: ops.l1_loss(p, np.linspace(-1, 1, 6)), lambda r: [r.normal(size=(6,))]),
    "l2_norm": (ops.l2_norm, lambda r: [r.normal(size=(3, 4))]),
    "frobenius_norm": (ops.frobenius_norm, lambda r: [r.normal(size=(3, 4))]),
}


def check_registered(points: int = 20, seed: int = 0, names: Sequence[str] | None = None) -> dict[str, GradCheckReport]:
    """Grad-check each registered op at ``points`` random points; keep each op's worst report."""
    results = {}
    for name in names or REGISTRY:
        op, make_inputs = REGISTRY[name]
        rng = np.random.default_rng([seed, sum(map(ord, name))])
        worst = None
        for _ in range(points):
            report = grad_check(lambda *ts: _scalarize(op(*ts)), make_inputs(rng))
            if worst is None or report.max_rel_error > worst.max_rel_error:
                worst = report
        results[name] = worst
    return results
