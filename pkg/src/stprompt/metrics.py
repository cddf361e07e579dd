"""Forecast error metrics, averaged per node first and then across nodes."""

from __future__ import annotations

import csv
from dataclasses import dataclass
from typing import Sequence

import numpy as np

MAPE_FLOOR = 1.0


def _check(y, y_hat) -> tuple[np.ndarray, np.ndarray]:
    y = np.asarray(y, dtype=np.float64)
    y_hat = np.asarray(y_hat, dtype=np.float64)
    if y.shape != y_hat.shape:
        raise ValueError(f"shape mismatch: {y.shape} vs {y_hat.shape}")
    if y.size == 0:
        raise ValueError("empty arrays")
    return y, y_hat


def _node_axis(ndim: int, node_axis: int | None) -> int | None:
    """(B, R, Q, F) arrays keep nodes on axis 1, other arrays on axis 0; 1-D input is one node."""
    if node_axis is not None:
        return node_axis
    if ndim == 1:
        return None
    return 1 if ndim == 4 else 0


def _per_node(values: np.ndarray, node_axis: int | None) -> np.ndarray:
    if node_axis is None:
        return np.array([values.mean()])
    moved = np.moveaxis(values, node_axis, 0)
    return moved.reshape(moved.shape[0], -1).mean(axis=1)


def mae(y, y_hat, node_axis: int | None = None) -> float:
    y, y_hat = _check(y, y_hat)
    return float(_per_node(np.abs(y - y_hat), _node_axis(y.ndim, node_axis)).mean())


def rmse(y, y_hat, node_axis: int | None = None) -> float:
    y, y_hat = _check(y, y_hat)
    return float(np.sqrt(_per_node((y - y_hat) ** 2, _node_axis(y.ndim, node_axis))).mean())


def mape(y, y_hat, floor: float = MAPE_FLOOR, node_axis: int | None = None) -> float:
    """Mean of |y - y_hat| / max(y, floor)."""
    y, y_hat = _check(y, y_hat)
    return float(_per_node(np.abs(y - y_hat) / np.maximum(y, floor), _node_axis(y.ndim, node_axis)).mean())


def horizon_weighted_mae(per_horizon: Sequence[float], decay: float = 0.95) -> float:
    """sum_h decay**h * MAE_h / sum_h decay**h, h counted from 0."""
    per_horizon = np.asarray(per_horizon, dtype=np.float64)
    if per_horizon.size == 0:
        raise ValueError("no horizons")
    if not 0 < decay <= 1:
        raise ValueError("decay must lie in (0, 1]")
    w = decay ** np.arange(per_horizon.size)
    return float((w * per_horizon).sum() / w.sum())


@dataclass
class MetricReport:
    mae: float
    rmse: float
    mape: float
    weighted_mae: float
    per_horizon: np.ndarray
    per_node: np.ndarray

    def rows(self) -> list[tuple]:
        rows = [("overall", "", "", m, getattr(self, m)) for m in ("mae", "rmse", "mape", "weighted_mae")]
        rows += [("horizon", h + 1, "", "mae", float(v)) for h, v in enumerate(self.per_horizon)]
        rows += [("node", "", r, "mae", float(v)) for r, v in enumerate(self.per_node)]
        return rows

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["scope", "horizon", "node", "metric", "value"])
            w.writerows(self.rows())


def evaluate(y, y_hat, decay: float = 0.95) -> MetricReport:
    """Full report for (B, R, Q, F) forecasts."""
    y, y_hat = _check(y, y_hat)
    if y.ndim != 4:
        raise ValueError("evaluate expects (batch, node, horizon, feature) arrays")
    err = np.abs(y - y_hat)
    per_horizon = np.array([mae(y[:, :, h], y_hat[:, :, h], node_axis=1) for h in range(y.shape[2])])
    per_node = _per_node(err, 1)
    return MetricReport(
        mae=mae(y, y_hat), rmse=rmse(y, y_hat), mape=mape(y, y_hat),
        weighted_mae=horizon_weighted_mae(per_horizon, decay),
        per_horizon=per_horizon, per_node=per_node,
    )
