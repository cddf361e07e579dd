"""Shift-recovery study and the adaptation benchmark (prompt vs fine-tune vs scratch)."""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, field, replace

import numpy as np

from ..backbone import BackboneConfig, BackboneModel
from ..diffengine import count_params
from ..errors import ConfigError
from ..pipeline.optim import make_optimizer
from ..pipeline.phases import (ForecastTask, TrainConfig, evaluate_split, finetune_all, freeze, pretrain,
                               prompt_tune, scratch_train, trainable_copy)
from ..prompt import PromptConfig, PromptNet, edit_magnitude
from ..stdata import SplitPlan, StTensor, normalize, split_chronological
from .synthetic import ShiftSpec, SyntheticSpec, apply_shift, gen_synthetic

log = logging.getLogger(__name__)

ARMS = ("prompt", "finetune", "scratch")


@dataclass(frozen=True)
class BenchSetup:
    """Everything a pilot run needs besides the scale and the seed."""

    n_steps: int = 2000
    tun_tail: int = 300
    period: int = 48
    d_hidden: int = 16
    d_skip: int = 16
    d_embed: int = 8
    layers: int = 2
    prompt_hidden: int = 32
    pretrain: TrainConfig = field(default_factory=lambda: TrainConfig(
        lr=3e-3, epochs=30, patience=5, optimizer="adam", curriculum=False))
    tune: TrainConfig = field(default_factory=lambda: TrainConfig(
        lr=1e-2, epochs=50, patience=5, optimizer="adam", curriculum=False, min_delta=1e-3))
    shift: ShiftSpec = ShiftSpec("phase_lag", lag=2)

    def backbone_config(self, n_nodes: int) -> BackboneConfig:
        return BackboneConfig(n_nodes=n_nodes, d_hidden=self.d_hidden, d_skip=self.d_skip,
                              d_embed=self.d_embed, layers=self.layers)

    def prompt_config(self) -> PromptConfig:
        return PromptConfig(d_hidden=self.prompt_hidden)


def build_tasks(data: StTensor, splits: SplitPlan, shift: ShiftSpec) -> tuple[ForecastTask, ForecastTask]:
    """Clean and shifted tasks sharing the clean normalisation statistics.

    The shift distorts inputs from ``splits.tun.start`` onwards while targets
    stay clean, so a good edit has to undo the distortion.
    """
    norm = normalize(data)
    shift = replace(shift, start=splits.tun.start, stop=None)
    shifted = (apply_shift(data, shift).data - norm.mean) / norm.std
    clean = ForecastTask(norm.data, norm.data, splits, norm.mean, norm.std)
    return clean, ForecastTask(shifted, norm.data, splits, norm.mean, norm.std)


@dataclass
class Pilot:
    """A pretrained, frozen backbone on one synthetic network."""

    model: BackboneModel
    digest: str
    data: StTensor
    splits: SplitPlan
    pretrain_seconds: float
    pretrain_val: float


def pilot_backbone(n_nodes: int, seed: int, setup: BenchSetup = BenchSetup()) -> Pilot:
    data, _ = gen_synthetic(SyntheticSpec(n_nodes=n_nodes, n_steps=setup.n_steps, period=setup.period, seed=seed))
    splits = split_chronological(data, tun_tail=setup.tun_tail)
    norm = normalize(data)
    task = ForecastTask(norm.data, norm.data, splits, norm.mean, norm.std)
    model = BackboneModel(setup.backbone_config(n_nodes), seed=seed)
    res = pretrain(model, task, replace(setup.pretrain, seed=seed))
    model, digest = freeze(model)
    return Pilot(model, digest, data, splits, res.seconds, res.best_val)


@dataclass
class RecoveryRecord:
    kind: str
    clean_mae: float
    shifted_mae: float
    tuned_mae: float
    steps: int
    edit: float

    @property
    def gap(self) -> float:
        return self.shifted_mae - self.clean_mae

    @property
    def recovered(self) -> float:
        """Fraction of the shift-induced test-MAE gap removed by the prompt."""
        return (self.shifted_mae - self.tuned_mae) / self.gap if self.gap > 0 else float("nan")


def shift_recovery(pilot: Pilot, shift: ShiftSpec, cfg: TrainConfig, prompt_config: PromptConfig = PromptConfig(),
                   seed: int = 0) -> tuple[RecoveryRecord, PromptNet]:
    """Tune a fresh prompt on shifted inputs and measure the recovered share of the test gap."""
    clean, shifted = build_tasks(pilot.data, pilot.splits, shift)
    base_clean = evaluate_split(pilot.model, None, clean, "tst").mae
    base_shift = evaluate_split(pilot.model, None, shifted, "tst").mae
    prompt = PromptNet(prompt_config, seed=seed)
    res = prompt_tune(prompt, pilot.model, shifted, replace(cfg, seed=seed), pilot.digest)
    tuned = evaluate_split(pilot.model, prompt, shifted, "tst").mae
    edit = edit_magnitude(prompt, shifted.windows("tst")[0])
    return RecoveryRecord(shift.kind, base_clean, base_shift, tuned, res.steps, edit), prompt


# -- benchmark -------------------------------------------------------------

ROW_FIELDS = ("scale", "arm", "seed", "params", "state_bytes", "steps", "seconds", "mae", "rmse", "mape",
              "diverged", "digest")
RATIO_FIELDS = ("scale", "seed", "arm", "param_ratio", "speedup_vs_finetune", "speedup_vs_scratch",
                "mae_vs_finetune")


@dataclass
class BenchRow:
    scale: int
    arm: str
    seed: int
    params: int
    state_bytes: int
    steps: int = 0
    seconds: float = math.nan
    mae: float = math.nan
    rmse: float = math.nan
    mape: float = math.nan
    diverged: bool = False
    digest: str = ""

    def values(self) -> list:
        return [getattr(self, f) for f in ROW_FIELDS]


@dataclass
class BenchReport:
    rows: list[BenchRow]
    backbone_params: dict[int, int]
    mode: str = "train"
    threads: str = "default"

    def arm_rows(self, arm: str, scale: int | None = None) -> list[BenchRow]:
        return [r for r in self.rows if r.arm == arm and (scale is None or r.scale == scale)]

    def _find(self, scale: int, seed: int, arm: str) -> BenchRow | None:
        for r in self.rows:
            if (r.scale, r.seed, r.arm) == (scale, seed, arm):
                return r
        return None

    def ratios(self) -> list[list]:
        """One row per (scale, seed, arm): param share of the backbone and speedups in wall-clock."""
        out = []
        for r in self.rows:
            ft = self._find(r.scale, r.seed, "finetune")
            sc = self._find(r.scale, r.seed, "scratch")

            def speed(other):
                if other is None or not r.seconds > 0 or math.isnan(other.seconds):
                    return math.nan
                return other.seconds / r.seconds

            mae_vs = r.mae / ft.mae if ft is not None and ft.mae > 0 else math.nan
            out.append([r.scale, r.seed, r.arm, r.params / self.backbone_params[r.scale],
                        speed(ft), speed(sc), mae_vs])
        return out

    def mean_seconds(self, arm: str, scale: int | None = None) -> float:
        rows = self.arm_rows(arm, scale)
        return float(np.mean([r.seconds for r in rows])) if rows else math.nan

    def time_ratio(self, num: str = "prompt", den: str = "finetune", scale: int | None = None) -> float:
        """Mean wall-clock of ``num`` over mean wall-clock of ``den``."""
        return self.mean_seconds(num, scale) / self.mean_seconds(den, scale)

    def write(self, rows_path, ratios_path=None, delimiter: str = "\t") -> None:
        with open(rows_path, "w", newline="") as fh:
            w = csv.writer(fh, delimiter=delimiter)
            w.writerow(ROW_FIELDS)
            w.writerows(r.values() for r in self.rows)
        if ratios_path is not None:
            with open(ratios_path, "w", newline="") as fh:
                w = csv.writer(fh, delimiter=delimiter)
                w.writerow(RATIO_FIELDS)
                w.writerows(self.ratios())


def prompt_mlp_ops(d_hidden: int = 32, layers: int = 2) -> int:
    """Multiplies per sample position of a ``layers``-deep d x d affine stack."""
    return layers * d_hidden ** 2


def _footprint(arm: str, model: BackboneModel, prompt: PromptNet, cfg: TrainConfig) -> tuple[int, int]:
    store = prompt.params if arm == "prompt" else model.params
    opt = make_optimizer(cfg.optimizer, store, max(cfg.lr, 0.0), cfg.weight_decay)
    return count_params(store, trainable_only=True), opt.state_bytes()


def run_bench(arms=ARMS, scales=(8,), seeds=(0,), setup: BenchSetup = BenchSetup(), mode: str = "train") -> BenchReport:
    """Run every arm for each scale and seed under one stopping rule.

    ``mode="count"`` builds the models and reports sizes without training,
    which is how large graphs are compared cheaply.
    """
    arms = tuple(arms)
    if not arms or set(arms) - set(ARMS):
        raise ConfigError(f"arms must be a non-empty subset of {ARMS}")
    if not seeds:
        raise ConfigError("at least one seed is needed")
    if mode not in ("train", "count"):
        raise ConfigError(f"unknown bench mode {mode!r}")
    rows: list[BenchRow] = []
    backbone_params: dict[int, int] = {}
    for scale in scales:
        for seed in seeds:
            if mode == "count":
                model = BackboneModel(setup.backbone_config(scale), seed=seed)
                backbone_params[scale] = model.n_params()
                frozen = trainable_copy(model)
                frozen.params.freeze()
                prompt = PromptNet(setup.prompt_config(), seed=seed)
                for arm in arms:
                    n, b = _footprint(arm, frozen if arm == "prompt" else model, prompt, setup.tune)
                    rows.append(BenchRow(scale, arm, seed, n, b))
                continue
            pilot = pilot_backbone(scale, seed, setup)
            backbone_params[scale] = pilot.model.n_params()
            _, task = build_tasks(pilot.data, pilot.splits, setup.shift)
            cfg = replace(setup.tune, seed=seed)
            for arm in arms:
                if arm == "prompt":
                    prompt = PromptNet(setup.prompt_config(), seed=seed)
                    res = prompt_tune(prompt, pilot.model, task, cfg, pilot.digest)
                    rep = evaluate_split(pilot.model, prompt, task, "tst")
                else:
                    model = (trainable_copy(pilot.model) if arm == "finetune"
                             else BackboneModel(setup.backbone_config(scale), seed=seed + 1))
                    res = (finetune_all if arm == "finetune" else scratch_train)(model, task, cfg)
                    rep = evaluate_split(model, None, task, "tst")
                rows.append(BenchRow(scale, arm, seed, res.trainable_params, res.optimizer_state_bytes, res.steps,
                                     res.seconds, rep.mae, rep.rmse, rep.mape, res.diverged, res.batch_digest))
                log.info("scale %d seed %d %s: %d steps in %.2fs, test MAE %.4f", scale, seed, arm, res.steps,
                         res.seconds, rep.mae)
    return BenchReport(rows, backbone_params, mode)
