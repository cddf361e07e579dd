"""Figures for run reports.  matplotlib is imported lazily so the rest of the package works without it."""

from __future__ import annotations

from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from .errors import ConfigError

ARM_COLORS = {"prompt": "#1b9e77", "finetune": "#d95f02", "scratch": "#7570b3", "frozen": "#666666"}


def _pyplot():
    try:
        import matplotlib
    except ImportError:
        raise ConfigError("plotting needs matplotlib; install the 'plot' extra") from None
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt
    return plt


def _save(fig, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.tight_layout()
    fig.savefig(path, dpi=120, metadata={"Software": None} if path.suffix == ".png" else None)
    fig.clf()
    return path


def learning_curves(curves: Mapping[str, Sequence[float]], path, ylabel: str = "validation MAE") -> Path:
    """One line per phase or arm, x axis in epochs."""
    plt = _pyplot()
    fig, ax = plt.subplots(figsize=(5, 3.2))
    for name, ys in curves.items():
        ax.plot(np.arange(1, len(ys) + 1), ys, marker="o", ms=3, label=name, color=ARM_COLORS.get(name))
    ax.set_xlabel("epoch")
    ax.set_ylabel(ylabel)
    ax.legend(frameon=False)
    path = _save(fig, path)
    plt.close(fig)
    return path


def per_horizon(errors: Mapping[str, Sequence[float]], path) -> Path:
    """MAE against forecast step for several models."""
    plt = _pyplot()
    fig, ax = plt.subplots(figsize=(5, 3.2))
    for name, ys in errors.items():
        ax.plot(np.arange(1, len(ys) + 1), ys, marker="o", ms=3, label=name, color=ARM_COLORS.get(name))
    ax.set_xlabel("horizon (steps)")
    ax.set_ylabel("MAE")
    ax.legend(frameon=False)
    path = _save(fig, path)
    plt.close(fig)
    return path


def bench_summary(report, path) -> Path:
    """Trainable parameters (log scale) and wall-clock per arm and scale, averaged over seeds."""
    plt = _pyplot()
    scales = sorted({r.scale for r in report.rows})
    arms = [a for a in ("prompt", "finetune", "scratch") if report.arm_rows(a)]
    fig, (ax_p, ax_t) = plt.subplots(1, 2, figsize=(8, 3.2))
    width = 0.8 / max(1, len(arms))
    x = np.arange(len(scales))
    for k, arm in enumerate(arms):
        params = [np.mean([r.params for r in report.arm_rows(arm, s)]) for s in scales]
        secs = [np.mean([r.seconds for r in report.arm_rows(arm, s)]) for s in scales]
        ax_p.bar(x + k * width, params, width, label=arm, color=ARM_COLORS[arm])
        ax_t.bar(x + k * width, np.nan_to_num(secs), width, label=arm, color=ARM_COLORS[arm])
    for ax in (ax_p, ax_t):
        ax.set_xticks(x + width * (len(arms) - 1) / 2)
        ax.set_xticklabels([str(s) for s in scales])
        ax.set_xlabel("nodes")
    ax_p.set_yscale("log")
    ax_p.set_ylabel("trainable parameters")
    ax_t.set_ylabel("tuning wall-clock (s)")
    ax_t.legend(frameon=False)
    path = _save(fig, path)
    plt.close(fig)
    return path
