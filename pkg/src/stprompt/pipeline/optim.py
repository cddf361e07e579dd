"""First-order optimizers over a ParamStore.  Frozen entries are never touched."""

from __future__ import annotations

import numpy as np

from ..diffengine import ParamStore, count_params
from ..errors import ConfigError


def sgd_step(params: dict[str, np.ndarray], grads: dict[str, np.ndarray], lr: float,
             weight_decay: float = 0.0, frozen: set[str] | frozenset = frozenset()) -> dict[str, np.ndarray]:
    """theta - lr * (grad + weight_decay * theta) for every entry not in ``frozen``."""
    if lr <= 0:
        raise ValueError("learning rate must be positive")
    out = {}
    for name, theta in params.items():
        if name in frozen:
            out[name] = theta
            continue
        if grads.get(name) is None:
            raise ValueError(f"missing gradient for trainable entry {name!r}")
        out[name] = theta - lr * (grads[name] + weight_decay * theta)
    return out


class Optimizer:
    #: per-parameter buffers kept beyond the gradient itself
    moments = 0

    def __init__(self, store: ParamStore, lr: float, weight_decay: float = 0.0):
        if lr < 0:
            raise ConfigError("learning rate must be non-negative")
        self.store = store
        self.lr = lr
        self.weight_decay = weight_decay
        self.steps = 0

    def _trainable(self):
        for name, t in self.store.trainable():
            if t.grad is None:
                raise ValueError(f"missing gradient for trainable entry {name!r}")
            yield name, t

    def _direction(self, name: str, g: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def step(self) -> None:
        self.steps += 1
        for name, t in self._trainable():
            g = t.grad
            if self.weight_decay:
                g = g + self.weight_decay * t.data
            t.data -= (self.lr * self._direction(name, g)).astype(t.dtype, copy=False)

    def zero_grad(self) -> None:
        self.store.zero_grad()

    def state_bytes(self) -> int:
        """Bytes of optimizer-held buffers: one gradient plus ``moments`` extra arrays per trainable scalar."""
        return count_params(self.store, trainable_only=True) * self.store.dtype.itemsize * (1 + self.moments)


class GradientDescent(Optimizer):
    def _direction(self, name, g):
        return g


class Momentum(Optimizer):
    moments = 1

    def __init__(self, store, lr, weight_decay=0.0, beta: float = 0.9):
        super().__init__(store, lr, weight_decay)
        self.beta = beta
        self._v: dict[str, np.ndarray] = {}

    def _direction(self, name, g):
        v = self._v.get(name)
        v = g.copy() if v is None else self.beta * v + g
        self._v[name] = v
        return v


class Adam(Optimizer):
    moments = 2

    def __init__(self, store, lr, weight_decay=0.0, betas=(0.9, 0.999), eps: float = 1e-8):
        super().__init__(store, lr, weight_decay)
        self.b1, self.b2 = betas
        self.eps = eps
        self._m: dict[str, np.ndarray] = {}
        self._v: dict[str, np.ndarray] = {}

    def _direction(self, name, g):
        m = self._m.get(name, np.zeros_like(g))
        v = self._v.get(name, np.zeros_like(g))
        m = self.b1 * m + (1 - self.b1) * g
        v = self.b2 * v + (1 - self.b2) * g * g
        self._m[name], self._v[name] = m, v
        m_hat = m / (1 - self.b1 ** self.steps)
        v_hat = v / (1 - self.b2 ** self.steps)
        return m_hat / (np.sqrt(v_hat) + self.eps)


OPTIMIZERS = {"sgd": GradientDescent, "momentum": Momentum, "adam": Adam}


def make_optimizer(kind: str, store: ParamStore, lr: float, weight_decay: float = 0.0) -> Optimizer:
    try:
        cls = OPTIMIZERS[kind]
    except KeyError:
        raise ConfigError(f"unknown optimizer {kind!r}; choose from {sorted(OPTIMIZERS)}") from None
    return cls(store, lr, weight_decay)
