"""MTGNN-style forecaster: learned directed graph, mix-hop propagation and gated
dilated-inception temporal convolutions, aggregated through per-layer skips."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass
from typing import Mapping, Sequence

import numpy as np

from .diffengine import ParamStore, Tensor, count_params, grad_check
from .diffengine import ops
from .diffengine.gradcheck import inception_receptive_field
from .errors import ConfigError
from .graph import sym_normalize, topk_mask


@dataclass
class BackboneConfig:
    n_nodes: int
    n_features: int = 1
    d_embed: int = 16
    d_hidden: int = 32
    d_skip: int = 32
    layers: int = 3
    mixhop_depth: int = 2
    retain: float = 0.05
    kernels: tuple[int, ...] = (2, 3, 6, 7)
    alpha: float = 3.0
    topk: int = 20
    lam: float = 1e-4
    mu: float = 1e-4
    horizon: int = 12
    history: int = 12
    learn_graph: bool = True

    def __post_init__(self):
        self.kernels = tuple(int(k) for k in self.kernels)
        if self.n_nodes < 1:
            raise ConfigError("n_nodes must be >= 1")
        if not self.kernels or min(self.kernels) < 1:
            raise ConfigError("kernel set must be nonempty with positive sizes")
        if not 0 <= self.retain <= 1:
            raise ConfigError("retain ratio must lie in [0, 1]")
        if self.mixhop_depth < 0:
            raise ConfigError("mix-hop depth must be >= 0")
        if self.alpha <= 0:
            raise ConfigError("alpha must be positive")
        if self.d_hidden < len(self.kernels):
            raise ConfigError("d_hidden must give every inception branch at least one channel")
        if self.layers < 1 or self.horizon < 1 or self.history < 1:
            raise ConfigError("layers, horizon and history must be positive")

    @property
    def k_eff(self) -> int:
        return min(self.topk, self.n_nodes)

    @property
    def receptive_field(self) -> int:
        return inception_receptive_field(max(self.kernels), self.layers)

    @property
    def seq_len(self) -> int:
        return max(self.history, self.receptive_field)

    def to_dict(self) -> dict:
        return asdict(self)


def split_channels(total: int, kernels: Sequence[int]) -> list[int]:
    """Even split of ``total`` over the kernels; leftovers go to the smallest kernels first."""
    base, extra = divmod(total, len(kernels))
    order = np.argsort(kernels, kind="stable")
    sizes = [base] * len(kernels)
    for i in order[:extra]:
        sizes[i] += 1
    return sizes


def node_partition(n_nodes: int, m: int, seed: int = 0) -> list[np.ndarray]:
    """Split a random permutation of the nodes into m subsets whose sizes differ by at most one."""
    if not 1 <= m <= n_nodes:
        raise ValueError(f"need 1 <= m <= {n_nodes}, got {m}")
    perm = np.random.default_rng(seed).permutation(n_nodes)
    return [np.sort(part) for part in np.array_split(perm, m)]


def curriculum_horizon(t: int, t_max: int, Q: int) -> int:
    if t_max <= 0:
        return Q
    q = math.floor(Q ** (min(max(t, 0), t_max) / t_max) + 1e-9)
    return int(min(max(q, 1), Q))


# -- graph learning --------------------------------------------------------

def learn_graph(E1, E2, theta1, theta2, alpha: float, k: int | None = None) -> Tensor:
    """A = relu(tanh(alpha (M1 M2^T - M2 M1^T))) with M_i = tanh(alpha E_i Theta_i).

    The argument of relu is antisymmetric, so A[i, j] > 0 forces A[j, i] = 0.
    ``k`` keeps each row's k largest entries; the selection is treated as a
    constant mask when differentiating.
    """
    M1 = ops.tanh(ops.mul(ops.matmul(E1, theta1), alpha))
    M2 = ops.tanh(ops.mul(ops.matmul(E2, theta2), alpha))
    arg = ops.sub(ops.matmul(M1, ops.transpose(M2)), ops.matmul(M2, ops.transpose(M1)))
    A = ops.relu(ops.tanh(ops.mul(arg, alpha)))
    if k is not None and k < A.shape[0]:
        A = ops.mul(A, topk_mask(A.data, k).astype(A.dtype))
    return A


def sym_normalize_t(A) -> Tensor:
    """Differentiable counterpart of ``graph.sym_normalize``."""
    R = A.shape[0]
    eye = np.eye(R, dtype=A.dtype)
    At = ops.add(ops.mul(A, 1 - eye), eye)
    dinv = ops.power(ops.sum(At, axis=1), -0.5)
    return ops.mul(ops.mul(At, ops.reshape(dinv, (R, 1))), ops.reshape(dinv, (1, R)))


# -- building blocks ---------------------------------------------------------

def mixhop_propagate(h, A_norm, retain: float, selectors: Sequence, ln_gain=None, ln_bias=None) -> Tensor:
    """sum_k H^(k) W^(k) + LayerNorm(H_in), H^(k) = retain H_in + (1 - retain) A H^(k-1).

    ``h`` has the node axis at position 1.
    """
    if len(selectors) == 0:
        raise ValueError("need at least one selector (hop 0)")
    hk = h
    out = ops.linear(hk, selectors[0])
    for W in selectors[1:]:
        hk = ops.add(ops.mul(h, retain), ops.mul(ops.node_mix(A_norm, hk, axis=1), 1 - retain))
        out = ops.add(out, ops.linear(hk, W))
    return ops.add(out, ops.layer_norm(h, ln_gain, ln_bias))


def required_length(kernels: Sequence[int], layer: int) -> int:
    """Shortest input that still spans the receptive field after inception layer ``layer``."""
    return inception_receptive_field(max(kernels), layer + 1)


def dilated_inception(z, weights: Mapping[int, object], layer: int, bias=None) -> Tensor:
    """Concatenate causal convs of several kernel sizes at dilation 2**layer.

    ``weights[s]`` has shape (s, C_in, C_s).  All branches are zero-padded to the
    largest kernel and run as a single convolution.
    """
    kernels = sorted(weights)
    T = z.shape[-2]
    need = required_length(kernels, layer)
    if T < need:
        raise ValueError(f"sequence too short: length {T} < required {need} at layer {layer}")
    kmax = kernels[-1]
    parts = []
    for s in kernels:
        w = weights[s]
        if s < kmax:
            w = ops.concat([w, np.zeros((kmax - s, *w.shape[1:]), dtype=w.dtype)], axis=0)
        parts.append(w)
    w_all = parts[0] if len(parts) == 1 else ops.concat(parts, axis=2)
    return ops.causal_dilated_conv1d(z, w_all, dilation=2 ** layer, bias=bias)


def glu(filter_out, gate_out) -> Tensor:
    return ops.mul(ops.tanh(filter_out), ops.sigmoid(gate_out))


# -- the model -----------------------------------------------------------------

def _glorot(rng, shape, fan_in, fan_out):
    bound = math.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-bound, bound, size=shape)


class BackboneModel:
    def __init__(self, config: BackboneConfig, seed: int = 0, dtype=np.float32,
                 static_adjacency: np.ndarray | None = None):
        self.config = config
        self.seed = seed
        self.params = ParamStore(seed, dtype)
        self.static_adjacency = None if static_adjacency is None else np.asarray(static_adjacency, dtype=np.float64)
        if not config.learn_graph and self.static_adjacency is None:
            raise ConfigError("a static adjacency is required when the graph is not learned")
        self._init(np.random.default_rng(seed))

    def _init(self, rng):
        c, p = self.config, self.params
        d, F = c.d_hidden, c.n_features
        if c.learn_graph:
            p.add("graph.E1", rng.normal(size=(c.n_nodes, c.d_embed)))
            p.add("graph.E2", rng.normal(size=(c.n_nodes, c.d_embed)))
            p.add("graph.theta1", _glorot(rng, (c.d_embed, c.d_embed), c.d_embed, c.d_embed))
            p.add("graph.theta2", _glorot(rng, (c.d_embed, c.d_embed), c.d_embed, c.d_embed))
        p.add("embed.W", _glorot(rng, (F, d), F, d))
        p.add("embed.b", np.zeros(d))
        T = c.seq_len
        p.add("skip0.W", _glorot(rng, (T * d, c.d_skip), T * d, c.d_skip))
        p.add("skip0.b", np.zeros(c.d_skip))
        sizes = split_channels(d, c.kernels)
        for l in range(c.layers):
            for k in range(c.mixhop_depth + 1):
                p.add(f"gc{l}.W{k}", _glorot(rng, (d, d), d, d))
            p.add(f"gc{l}.ln_gain", np.ones(d))
            p.add(f"gc{l}.ln_bias", np.zeros(d))
            for part in ("filter", "gate"):
                for s, cs in zip(c.kernels, sizes):
                    p.add(f"tc{l}.{part}.k{s}", _glorot(rng, (s, d, cs), s * d, s * cs))
                p.add(f"tc{l}.{part}.b", np.zeros(d))
            p.add(f"skip{l + 1}.W", _glorot(rng, (T * d, c.d_skip), T * d, c.d_skip))
            p.add(f"skip{l + 1}.b", np.zeros(c.d_skip))
        n_skip = (c.layers + 1) * c.d_skip
        p.add("head.W", _glorot(rng, (n_skip, c.horizon * F), n_skip, c.horizon * F))
        p.add("head.b", np.zeros(c.horizon * F))

    # -- pieces ---------------------------------------------------------------
    def n_params(self, trainable_only: bool = False) -> int:
        return count_params(self.params, trainable_only)

    def adjacency(self, node_idx=None, params: Mapping[str, Tensor] | None = None):
        """Raw (pre-normalisation) adjacency, learned or static, for the selected nodes."""
        c = self.config
        P = self.params if params is None else params
        if not c.learn_graph:
            A = self.static_adjacency
            return A if node_idx is None else A[np.ix_(node_idx, node_idx)]
        E1, E2 = P["graph.E1"], P["graph.E2"]
        if node_idx is not None:
            E1, E2 = ops.index(E1, np.asarray(node_idx)), ops.index(E2, np.asarray(node_idx))
        k = min(c.topk, E1.shape[0])
        return learn_graph(E1, E2, P["graph.theta1"], P["graph.theta2"], c.alpha, k)

    def _normalized_adjacency(self, node_idx, params):
        # a frozen store can never change again, so its graph is computed once
        cacheable = params is None and node_idx is None and self.params.all_frozen
        key = tuple(id(t.data) for n, t in self.params.items() if n.startswith("graph."))
        cached = getattr(self, "_frozen_graph", None)
        if cacheable and cached is not None and cached[0] == key:
            return cached[1], cached[2]
        A = self.adjacency(node_idx, params)
        if isinstance(A, Tensor):
            A_norm = sym_normalize_t(A)
        else:
            A_norm = sym_normalize(A).astype(self.params.dtype)
        if cacheable:
            self._frozen_graph = (key, A, A_norm)
        return A, A_norm

    def _skip(self, h, l, P):
        B, R, T, d = h.shape
        return ops.linear(ops.reshape(h, (B, R, T * d)), P[f"skip{l}.W"], P[f"skip{l}.b"])

    def forward(self, x, node_idx=None, params: Mapping[str, Tensor] | None = None,
                return_adjacency: bool = False, return_hidden: bool = False):
        """Forecast (B, R, Q, F) from (B, R, L_in, F) windows."""
        c = self.config
        P = self.params if params is None else params
        xv = x.data if isinstance(x, Tensor) else np.asarray(x, dtype=self.params.dtype)
        if xv.ndim != 4 or xv.shape[-1] != c.n_features or xv.shape[2] != c.history:
            raise ValueError(f"expected input (B, R, {c.history}, {c.n_features}), got {xv.shape}")
        n_sel = c.n_nodes if node_idx is None else len(node_idx)
        if xv.shape[1] != n_sel:
            raise ValueError(f"input has {xv.shape[1]} nodes, expected {n_sel}")
        if not isinstance(x, Tensor):
            x = Tensor(xv)
        pad = c.seq_len - c.history
        if pad:
            x = ops.pad(x, [(0, 0), (0, 0), (pad, 0), (0, 0)])

        A, A_norm = self._normalized_adjacency(node_idx, params)

        h = ops.linear(x, P["embed.W"], P["embed.b"])
        skips = [self._skip(h, 0, P)]
        for l in range(c.layers):
            g = mixhop_propagate(h, A_norm, c.retain, [P[f"gc{l}.W{k}"] for k in range(c.mixhop_depth + 1)],
                                 P[f"gc{l}.ln_gain"], P[f"gc{l}.ln_bias"])
            fw = {s: P[f"tc{l}.filter.k{s}"] for s in c.kernels}
            gw = {s: P[f"tc{l}.gate.k{s}"] for s in c.kernels}
            z = glu(dilated_inception(g, fw, l, P[f"tc{l}.filter.b"]), dilated_inception(g, gw, l, P[f"tc{l}.gate.b"]))
            h = ops.add(z, h)
            skips.append(self._skip(h, l + 1, P))
        s = ops.concat(skips, axis=-1)
        out = ops.linear(s, P["head.W"], P["head.b"])
        B, R = out.shape[:2]
        y = ops.reshape(out, (B, R, c.horizon, c.n_features))
        extras = []
        if return_adjacency:
            extras.append(A)
        if return_hidden:
            extras.append(h)
        return (y, *extras) if extras else y

    __call__ = forward

    def loss(self, pred, target, A=None, q: int | None = None, params: Mapping[str, Tensor] | None = None) -> Tensor:
        """Regularised training loss over the first ``q`` horizon steps."""
        c = self.config
        P = self.params if params is None else params
        theta = [P[n] for n in self.params.names()]
        if q is not None and q < c.horizon:
            pred = ops.index(pred, (slice(None), slice(None), slice(0, q)))
            target = np.asarray(target)[:, :, :q]
        return pretrain_loss(pred, target, theta, A if isinstance(A, Tensor) else None, c.lam, c.mu)


def pretrain_loss(pred, target, params: Sequence = (), A=None, lam: float = 0.0, mu: float = 0.0) -> Tensor:
    """MAE + lam * ||Theta||_2 + mu * ||A||_F, with ||Theta||_2 taken over all entries of all params."""
    loss = ops.l1_loss(pred, target)
    if lam and params:
        sq = ops.sum(ops.mul(params[0], params[0]))
        for p in params[1:]:
            sq = ops.add(sq, ops.sum(ops.mul(p, p)))
        loss = ops.add(loss, ops.mul(ops.sqrt(sq), lam))
    if mu and A is not None:
        loss = ops.add(loss, ops.mul(ops.frobenius_norm(A), mu))
    return loss


def tiny_grad_check(seed: int = 0, max_coords: int = 15):
    """Finite-difference check of the full regularised loss of a 4-node, d=8, one-layer model in float64."""
    cfg = BackboneConfig(n_nodes=4, d_hidden=8, d_skip=8, d_embed=4, layers=1, horizon=3)
    model = BackboneModel(cfg, seed=seed, dtype=np.float64)
    names = model.params.names()
    rng = np.random.default_rng(seed)
    x = rng.normal(size=(2, 4, cfg.history, 1))
    y = rng.normal(size=(2, 4, cfg.horizon, 1))

    def fn(*ts):
        P = dict(zip(names, ts))
        pred, A = model.forward(x, params=P, return_adjacency=True)
        return model.loss(pred, y, A, params=P)

    return grad_check(fn, [model.params[n].data for n in names], max_coords=max_coords, seed=seed)
