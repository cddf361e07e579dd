"""Pre-training, freezing, prompt tuning and the two comparison arms."""

from __future__ import annotations

import hashlib
import logging
import math
import time
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .. import metrics
from ..backbone import BackboneModel, curriculum_horizon, node_partition
from ..diffengine import NonFiniteError, ParamStore, count_params, no_grad
from ..diffengine import ops
from ..errors import ConfigError, ContractViolation, DataError
from ..prompt import PromptNet
from ..stdata import SplitPlan, gather_windows, window_origins
from .optim import make_optimizer

log = logging.getLogger(__name__)


@dataclass
class ForecastTask:
    """Normalised model inputs and targets over one time axis, plus the split plan.

    ``targets`` differs from ``inputs`` only when the inputs were deliberately
    distorted (shift experiments); otherwise pass the same array.
    """

    inputs: np.ndarray
    targets: np.ndarray
    splits: SplitPlan
    mean: np.ndarray
    std: np.ndarray
    L_in: int = 12
    L_out: int = 12
    stride: int = 1
    holdout: float = 0.2
    _cache: dict = field(default_factory=dict, repr=False)

    def __post_init__(self):
        if self.inputs.shape != self.targets.shape:
            raise DataError("inputs and targets must share a shape")
        if not 0 < self.holdout < 1:
            raise ConfigError("holdout fraction must lie in (0, 1)")

    @property
    def n_nodes(self) -> int:
        return self.inputs.shape[0]

    def windows(self, name: str, dtype=np.float32) -> tuple[np.ndarray, np.ndarray]:
        """Windows of a split; ``tun_fit``/``tun_hold`` divide the tuning windows chronologically."""
        key = (name, np.dtype(dtype).str)
        if key not in self._cache:
            base = name.split("_")[0]
            origins = window_origins(getattr(self.splits, base), self.L_in, self.L_out, self.stride)
            if base == "tun" and name != "tun":
                n_hold = max(1, int(round(self.holdout * len(origins))))
                if len(origins) - n_hold < 1:
                    raise DataError("tuning range too short to hold out windows for early stopping")
                origins = origins[:-n_hold] if name == "tun_fit" else origins[-n_hold:]
            if len(origins) == 0:
                raise DataError(f"split {name!r} holds no complete window")
            x, y = gather_windows(self.inputs, origins, self.L_in, self.L_out, self.targets)
            self._cache[key] = (x.astype(dtype), y.astype(dtype))
        return self._cache[key]

    def denormalize(self, values: np.ndarray) -> np.ndarray:
        return values * self.std + self.mean


@dataclass
class TrainConfig:
    lr: float = 0.003
    batch_size: int = 32
    epochs: int = 10
    weight_decay: float = 1e-4
    optimizer: str = "sgd"
    patience: int = 10
    seed: int = 0
    max_steps: int | None = None
    curriculum: bool = True
    partitions: int = 1
    dropout_in_training: bool = True
    min_delta: float = 0.0

    def __post_init__(self):
        if self.lr < 0:
            raise ConfigError("lr must be non-negative")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")
        if self.patience < 1:
            raise ConfigError("patience must be >= 1")
        if self.epochs < 0:
            raise ConfigError("epochs must be >= 0")


def pretrain_defaults(**kw) -> TrainConfig:
    return TrainConfig(**{"lr": 0.003, **kw})


def tune_defaults(**kw) -> TrainConfig:
    return TrainConfig(**{"lr": 1e-3, "curriculum": False, **kw})


@dataclass
class EpochRecord:
    epoch: int
    split: str
    train_loss: float
    mae: float
    rmse: float
    mape: float
    seconds: float


@dataclass
class PhaseResult:
    phase: str
    params: ParamStore
    history: list[EpochRecord]
    steps: int
    best_epoch: int
    best_val: float
    seconds: float
    trainable_params: int
    optimizer_state_bytes: int
    batch_digest: str
    diverged: bool = False
    stopped_early: bool = False
    best_step: int = 0

    @property
    def val_curve(self) -> list[float]:
        return [r.mae for r in self.history]


def _snapshot(store: ParamStore) -> dict[str, np.ndarray]:
    return {n: t.data.copy() for n, t in store.trainable()}


def _restore(store: ParamStore, snap: dict[str, np.ndarray]) -> None:
    for n, arr in snap.items():
        store[n].data = arr.copy()


def _batched_predict(fn: Callable[[np.ndarray], np.ndarray], x: np.ndarray, chunk: int = 256) -> np.ndarray:
    with no_grad():
        return np.concatenate([fn(x[i:i + chunk]) for i in range(0, len(x), chunk)], axis=0)


def _fit(phase: str, store: ParamStore, loss_fn, predict_fn, task: ForecastTask, train_split: str,
         eval_split: str, cfg: TrainConfig) -> PhaseResult:
    """Shared minibatch loop with per-epoch validation, best-checkpoint retention and patience."""
    x, y = task.windows(train_split)
    xv, yv = task.windows(eval_split)
    yv_den = task.denormalize(yv.astype(np.float64))
    opt = make_optimizer(cfg.optimizer, store, cfg.lr, cfg.weight_decay)
    n = len(x)
    per_epoch = math.ceil(n / cfg.batch_size)
    total = cfg.epochs * per_epoch if cfg.max_steps is None else min(cfg.epochs * per_epoch, cfg.max_steps)
    # the whole planned schedule is hashed up front, so arms that stop at
    # different epochs still report the same digest for the same sequence
    orders = [np.random.default_rng([cfg.seed, e]).permutation(n) for e in range(1, cfg.epochs + 1)]
    digest = hashlib.sha256(np.asarray([n, cfg.batch_size], dtype="<i8").tobytes())
    for o in orders:
        digest.update(o.astype("<i8").tobytes())

    def evaluate() -> metrics.MetricReport:
        pred = _batched_predict(predict_fn, xv)
        return metrics.evaluate(yv_den, task.denormalize(pred.astype(np.float64)))

    history: list[EpochRecord] = []
    best_val = evaluate().mae
    best_snap, best_epoch, best_step = _snapshot(store), 0, 0
    step, bad, diverged, stopped = 0, 0, False, False
    start = time.perf_counter()
    for epoch in range(1, cfg.epochs + 1):
        order = orders[epoch - 1]
        losses = []
        try:
            for b in range(0, n, cfg.batch_size):
                if cfg.max_steps is not None and step >= cfg.max_steps:
                    break
                idx = order[b:b + cfg.batch_size]
                loss = loss_fn(x[idx], y[idx], step, total)
                opt.zero_grad()
                loss.backward()
                opt.step()
                step += 1
                losses.append(float(loss.data))
                if not np.isfinite(losses[-1]):
                    raise NonFiniteError("loss")
        except NonFiniteError as exc:
            log.warning("%s diverged at step %d (%s); keeping the best checkpoint", phase, step, exc)
            diverged = True
        report = None
        if not diverged:
            try:
                report = evaluate()
            except NonFiniteError:
                diverged = True
        if diverged:
            break
        elapsed = time.perf_counter() - start
        history.append(EpochRecord(epoch, eval_split, float(np.mean(losses)) if losses else float("nan"),
                                   report.mae, report.rmse, report.mape, elapsed))
        if report.mae < best_val - cfg.min_delta:
            best_val, best_snap, best_epoch, best_step, bad = report.mae, _snapshot(store), epoch, step, 0
        else:
            bad += 1
            if bad >= cfg.patience:
                stopped = True
                break
        if cfg.max_steps is not None and step >= cfg.max_steps:
            break
    seconds = time.perf_counter() - start
    _restore(store, best_snap)
    return PhaseResult(
        phase=phase, params=store, history=history, steps=step, best_epoch=best_epoch, best_val=best_val,
        seconds=seconds, trainable_params=count_params(store, trainable_only=True),
        optimizer_state_bytes=opt.state_bytes(), batch_digest=digest.hexdigest(),
        diverged=diverged, stopped_early=stopped, best_step=best_step,
    )


def _model_predict(model: BackboneModel, prompt: PromptNet | None = None):
    def fn(xb):
        if prompt is not None:
            xb = prompt.forward(xb)
        return model.forward(xb).data
    return fn


def pretrain(model: BackboneModel, task: ForecastTask, cfg: TrainConfig) -> PhaseResult:
    """Fit every backbone parameter on the ``pre`` windows, validating on ``val``."""
    Q = model.config.horizon
    R = model.config.n_nodes
    if cfg.partitions > 1:
        parts_by_epoch: dict[int, list] = {}

    def loss_fn(xb, yb, step, total):
        q = curriculum_horizon(step, total, Q) if cfg.curriculum else Q
        if cfg.partitions > 1:
            epoch = step // max(1, math.ceil(len(task.windows("pre")[0]) / cfg.batch_size))
            parts = parts_by_epoch.setdefault(epoch, node_partition(R, cfg.partitions, cfg.seed + epoch))
            idx = parts[step % cfg.partitions]
            pred, A = model.forward(xb[:, idx], node_idx=idx, return_adjacency=True)
            return model.loss(pred, yb[:, idx], A, q)
        pred, A = model.forward(xb, return_adjacency=True)
        return model.loss(pred, yb, A, q)

    return _fit("pretrain", model.params, loss_fn, _model_predict(model), task, "pre", "val", cfg)


def freeze(model: BackboneModel) -> tuple[BackboneModel, str]:
    """Mark every backbone entry frozen and return the parameter digest."""
    model.params.freeze()
    return model, model.params.digest()


def prompt_tune(prompt: PromptNet, frozen_model: BackboneModel, task: ForecastTask, cfg: TrainConfig,
                digest: str | None = None) -> PhaseResult:
    """Optimise only the prompt so that g(h(X)) fits the tuning targets.

    The backbone digest is checked before and after; any change is a contract violation.
    """
    if not frozen_model.params.all_frozen:
        raise ContractViolation("prompt tuning needs a frozen backbone")
    before = frozen_model.params.digest()
    if digest is not None and digest != before:
        raise ContractViolation(f"backbone digest {before[:12]} does not match the recorded {digest[:12]}")
    rng = np.random.default_rng([cfg.seed, 17])

    def loss_fn(xb, yb, step, total):
        edited = prompt.forward(xb, train_mode=cfg.dropout_in_training, rng=rng)
        return ops.l1_loss(frozen_model.forward(edited), yb)

    result = _fit("prompt", prompt.params, loss_fn, _model_predict(frozen_model, prompt), task,
                  "tun_fit", "tun_hold", cfg)
    after = frozen_model.params.digest()
    if after != before:
        raise ContractViolation("backbone parameters changed during prompt tuning")
    return result


def _tune_whole(phase: str, model: BackboneModel, task: ForecastTask, cfg: TrainConfig) -> PhaseResult:
    if model.params.all_frozen:
        raise ContractViolation(f"{phase} needs trainable backbone parameters")

    def loss_fn(xb, yb, step, total):
        return ops.l1_loss(model.forward(xb), yb)

    return _fit(phase, model.params, loss_fn, _model_predict(model), task, "tun_fit", "tun_hold", cfg)


def finetune_all(model_copy: BackboneModel, task: ForecastTask, cfg: TrainConfig) -> PhaseResult:
    """Update every parameter of a copy of the pre-trained backbone on the tuning windows."""
    return _tune_whole("finetune", model_copy, task, cfg)


def scratch_train(fresh_model: BackboneModel, task: ForecastTask, cfg: TrainConfig) -> PhaseResult:
    """Train a freshly initialised backbone on the tuning windows only."""
    return _tune_whole("scratch", fresh_model, task, cfg)


def trainable_copy(model: BackboneModel) -> BackboneModel:
    """Independent copy of a backbone with every entry trainable (for the fine-tuning arm)."""
    clone = BackboneModel.__new__(BackboneModel)
    clone.config = model.config
    clone.seed = model.seed
    clone.static_adjacency = model.static_adjacency
    clone.params = model.params.copy(keep_frozen=False)
    return clone


def predict(frozen_model: BackboneModel, prompt: PromptNet | None, x: np.ndarray,
            mean: np.ndarray | None = None, std: np.ndarray | None = None) -> np.ndarray:
    """g(h(X)) for (R, L_in, F) or (B, R, L_in, F) windows, denormalised when mean/std are given."""
    x = np.asarray(x, dtype=frozen_model.params.dtype)
    single = x.ndim == 3
    if single:
        x = x[None]
    out = _batched_predict(_model_predict(frozen_model, prompt), x)
    if mean is not None:
        out = out * std + mean
    return out[0] if single else out


def evaluate_split(model: BackboneModel, prompt: PromptNet | None, task: ForecastTask,
                   split: str) -> metrics.MetricReport:
    x, y = task.windows(split)
    pred = _batched_predict(_model_predict(model, prompt), x)
    return metrics.evaluate(task.denormalize(y.astype(np.float64)), task.denormalize(pred.astype(np.float64)))
