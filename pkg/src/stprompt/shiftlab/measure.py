"""Shift and sensitivity measurements: 1-D Wasserstein distance and Lipschitz probes."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np


def wasserstein1_1d(a, b) -> float:
    """W1 between two empirical distributions on the line.

    Integrates |F_a^{-1}(u) - F_b^{-1}(u)| over u in [0, 1]; with equal sample
    counts this is the mean gap between sorted samples.
    """
    a = np.sort(np.asarray(a, dtype=np.float64).ravel())
    b = np.sort(np.asarray(b, dtype=np.float64).ravel())
    if a.size == 0 or b.size == 0:
        raise ValueError("empty sample")
    if a.size == b.size:
        return float(np.mean(np.abs(a - b)))
    cuts = np.union1d(np.arange(1, a.size + 1) / a.size, np.arange(1, b.size + 1) / b.size)
    widths = np.diff(np.concatenate([[0.0], cuts]))
    mid = cuts - widths / 2
    qa = a[np.minimum((mid * a.size).astype(int), a.size - 1)]
    qb = b[np.minimum((mid * b.size).astype(int), b.size - 1)]
    return float(np.sum(widths * np.abs(qa - qb)))


@dataclass
class LipschitzEstimate:
    value: float
    pair: tuple[np.ndarray, np.ndarray] | None
    n_pairs: int


def estimate_lipschitz(fn: Callable[[np.ndarray], np.ndarray], probes: np.ndarray, n_pairs: int = 200,
                       seed: int = 0, local_scale: float = 1e-2) -> LipschitzEstimate:
    """Largest observed ||f(x) - f(x')|| / ||x - x'||: a lower bound on the Lipschitz constant.

    Half the pairs join two random probes, the other half a probe and a small
    random perturbation of it.  ``fn`` maps a batch (N, ...) to outputs (N, ...).
    Coincident pairs are skipped.
    """
    probes = np.asarray(probes, dtype=np.float64)
    if len(probes) == 0:
        raise ValueError("no probes")
    rng = np.random.default_rng(seed)
    n_far = n_pairs // 2 if len(probes) > 1 else 0
    i = rng.integers(len(probes), size=n_far)
    j = rng.integers(len(probes), size=n_far)
    k = rng.integers(len(probes), size=n_pairs - n_far)
    scale = local_scale * (np.std(probes) or 1.0)
    near = probes[k] + rng.normal(scale=scale, size=probes[k].shape)
    xa = np.concatenate([probes[i], probes[k]])
    xb = np.concatenate([probes[j], near])
    fa = np.asarray(fn(xa), dtype=np.float64)
    fb = np.asarray(fn(xb), dtype=np.float64)
    dx = np.linalg.norm((xa - xb).reshape(len(xa), -1), axis=1)
    df = np.linalg.norm((fa - fb).reshape(len(fa), -1), axis=1)
    ok = dx > 0
    if not ok.any():
        return LipschitzEstimate(0.0, None, 0)
    ratio = np.where(ok, df / np.where(ok, dx, 1.0), -np.inf)
    best = int(np.argmax(ratio))
    return LipschitzEstimate(float(ratio[best]), (xa[best], xb[best]), int(ok.sum()))


def marginal_w1(a: np.ndarray, b: np.ndarray) -> float:
    """Mean over features (last axis) of the W1 between per-feature marginals."""
    a = np.asarray(a)
    b = np.asarray(b)
    return float(np.mean([wasserstein1_1d(a[..., f], b[..., f]) for f in range(a.shape[-1])]))


@dataclass
class StabilityRecord:
    epsilon: float
    lipschitz_g: float
    lipschitz_h: float
    gap: float
    bound: float
    holds: bool


def stability_probe(g: Callable[[np.ndarray], np.ndarray], h: Callable[[np.ndarray], np.ndarray],
                    pre_windows: np.ndarray, tun_windows: np.ndarray, n_pairs: int = 200,
                    seed: int = 0) -> StabilityRecord:
    """Compare the observed prediction shift with L_g * L_h * epsilon.

    epsilon is the mean per-feature W1 between pre and tuning input windows, the
    gap is the same distance between g(pre) and g(h(tun)).  The Lipschitz values
    are empirical lower bounds, so ``holds`` is a diagnostic only.
    """
    eps = marginal_w1(pre_windows, tun_windows)
    lg = estimate_lipschitz(g, pre_windows, n_pairs, seed).value
    lh = estimate_lipschitz(h, tun_windows, n_pairs, seed + 1).value
    gap = marginal_w1(g(pre_windows), g(h(tun_windows)))
    bound = lg * lh * eps
    return StabilityRecord(eps, lg, lh, gap, bound, bool(gap <= bound))
