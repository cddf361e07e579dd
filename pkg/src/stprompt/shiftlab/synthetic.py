"""Synthetic periodic sensor networks and controlled distribution shifts."""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from ..graph import SensorGraph, kernel_adjacency
from ..stdata import StTensor


@dataclass(frozen=True)
class SyntheticSpec:
    n_nodes: int = 8
    n_steps: int = 2000
    n_features: int = 1
    period: int = 48
    amp_range: tuple[float, float] = (0.5, 1.5)
    noise_std: float = 0.05
    coupling: float = 0.3
    level: float = 0.0
    graph: str = "ring"
    radius: float = 0.35
    seed: int = 0

    def __post_init__(self):
        if self.period < 2:
            raise ValueError("period must be >= 2")
        if self.noise_std < 0:
            raise ValueError("noise_std must be >= 0")
        if self.graph not in ("ring", "geometric"):
            raise ValueError(f"unknown graph kind {self.graph!r}")


def ring_graph(n: int) -> SensorGraph:
    if n == 1:
        return SensorGraph.empty(1)
    edges = {(i, (i + 1) % n) for i in range(n)} | {((i + 1) % n, i) for i in range(n)}
    return SensorGraph.from_edges(n, [(i, j, 1.0) for i, j in sorted(edges) if i != j])


def geometric_graph(n: int, radius: float, rng: np.random.Generator) -> SensorGraph:
    """Points in the unit square joined both ways when closer than ``radius``; kernel-weighted."""
    pts = rng.uniform(size=(n, 2))
    d = np.linalg.norm(pts[:, None] - pts[None], axis=-1)
    edges = [(i, j, d[i, j]) for i in range(n) for j in range(n) if i != j and d[i, j] < radius]
    return kernel_adjacency(edges, sigma2=radius ** 2, n=n)


def gen_synthetic(spec: SyntheticSpec) -> tuple[StTensor, SensorGraph]:
    """a_r sin(2 pi t / P + phi_r) plus ``coupling`` times the neighbours' mean clean signal, plus noise."""
    rng = np.random.default_rng(spec.seed)
    R, T, F = spec.n_nodes, spec.n_steps, spec.n_features
    graph = ring_graph(R) if spec.graph == "ring" else geometric_graph(R, spec.radius, rng)
    amp = rng.uniform(*spec.amp_range, size=(R, 1, F))
    phase = rng.uniform(0, 2 * np.pi, size=(R, 1, F))
    t = np.arange(T)[None, :, None]
    clean = amp * np.sin(2 * np.pi * t / spec.period + phase)
    out = clean.copy()
    if spec.coupling:
        for r in range(R):
            nb = graph.neighbors(r)
            if len(nb):
                out[r] += spec.coupling * clean[nb].mean(axis=0)
    if spec.noise_std:
        out += rng.normal(scale=spec.noise_std, size=out.shape)
    return StTensor(out + spec.level, timestamps=np.arange(T)), graph


@dataclass(frozen=True)
class ShiftSpec:
    kind: str = "phase_lag"
    lag: int = 0
    scale: float = 1.0
    start: int = 0
    stop: int | None = None

    def __post_init__(self):
        if self.kind not in ("phase_lag", "amplitude", "mixed"):
            raise ValueError(f"unknown shift kind {self.kind!r}")
        if self.lag < 0:
            raise ValueError("lag must be >= 0")
        if self.scale <= 0:
            raise ValueError("scale must be positive")


def apply_shift(x: StTensor | np.ndarray, shift: ShiftSpec) -> StTensor | np.ndarray:
    """Delay by ``lag`` steps (earlier-than-zero reads take x(0)) and/or scale by ``scale`` inside [start, stop)."""
    data = x.data if isinstance(x, StTensor) else np.asarray(x, dtype=np.float64)
    T = data.shape[1]
    stop = T if shift.stop is None else shift.stop
    if not 0 <= shift.start <= stop <= T:
        raise ValueError(f"shift range [{shift.start}, {stop}) outside [0, {T}]")
    out = data.copy()
    t = np.arange(shift.start, stop)
    if shift.kind in ("phase_lag", "mixed") and shift.lag:
        out[:, t] = data[:, np.maximum(t - shift.lag, 0)]
    if shift.kind in ("amplitude", "mixed") and shift.scale != 1.0:
        out[:, t] = out[:, t] * shift.scale
    return replace(x, data=out) if isinstance(x, StTensor) else out
