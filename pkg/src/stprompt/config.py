"""Run configuration: declared keys with defaults, an INI file layer and ``--set`` overrides.

Precedence, lowest first: built-in defaults, the config file, ``--set key=value``,
then dedicated flags such as ``--seed``.  Keys are ``section.name``.
"""

from __future__ import annotations

import configparser
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Iterable

from .errors import ConfigError

# key -> (type, default); the pilot settings calibrated for the synthetic study
SCHEMA: dict[str, tuple[type, Any]] = {
    "run.seed": (int, 0),
    "run.single_thread": (bool, True),
    "data.tun_tail": (int, 300),
    "data.f_train": (float, 0.6),
    "data.f_val": (float, 0.2),
    "data.window_in": (int, 12),
    "data.window_out": (int, 12),
    "data.impute_decay": (float, 0.1),
    "data.impute_window": (int, 288),
    "data.anomaly_z": (float, 5.0),
    "data.sigma2": (float, 25.0),
    "synthetic.nodes": (int, 8),
    "synthetic.steps": (int, 2000),
    "synthetic.period": (int, 48),
    "synthetic.noise": (float, 0.05),
    "synthetic.coupling": (float, 0.3),
    "synthetic.graph": (str, "ring"),
    "shift.kind": (str, "phase_lag"),
    "shift.lag": (int, 2),
    "shift.scale": (float, 1.0),
    "backbone.d_hidden": (int, 16),
    "backbone.d_skip": (int, 16),
    "backbone.d_embed": (int, 8),
    "backbone.layers": (int, 2),
    "backbone.topk": (int, 20),
    "backbone.learn_graph": (bool, True),
    "prompt.d_hidden": (int, 32),
    "prompt.dropout": (float, 0.1),
    "pretrain.lr": (float, 3e-3),
    "pretrain.epochs": (int, 30),
    "pretrain.patience": (int, 5),
    "pretrain.optimizer": (str, "adam"),
    "pretrain.batch_size": (int, 32),
    "pretrain.weight_decay": (float, 1e-4),
    "pretrain.curriculum": (bool, False),
    "pretrain.partitions": (int, 1),
    "tune.lr": (float, 1e-2),
    "tune.epochs": (int, 50),
    "tune.patience": (int, 5),
    "tune.optimizer": (str, "adam"),
    "tune.batch_size": (int, 32),
    "tune.weight_decay": (float, 1e-4),
    "tune.min_delta": (float, 1e-3),
    "tune.max_steps": (int, 0),
    "bench.arms": (str, "prompt,finetune,scratch"),
    "bench.scales": (str, "8"),
    "bench.seeds": (int, 1),
}

_TRUE = {"1", "true", "yes", "on"}
_FALSE = {"0", "false", "no", "off"}


def _coerce(key: str, raw: Any) -> Any:
    kind = SCHEMA[key][0]
    if not isinstance(raw, str):
        return kind(raw)
    text = raw.strip()
    try:
        if kind is bool:
            if text.lower() in _TRUE:
                return True
            if text.lower() in _FALSE:
                return False
            raise ValueError(text)
        return kind(text)
    except ValueError:
        raise ConfigError(f"{key}: cannot read {raw!r} as {kind.__name__}") from None


def _render(value: Any) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    return repr(value) if isinstance(value, float) else str(value)


@dataclass
class RunConfig:
    values: dict[str, Any] = field(default_factory=lambda: {k: d for k, (_, d) in SCHEMA.items()})

    def __getitem__(self, key: str) -> Any:
        if key not in self.values:
            raise ConfigError(f"unknown config key {key!r}")
        return self.values[key]

    def set(self, key: str, raw: Any) -> None:
        if key not in SCHEMA:
            raise ConfigError(f"unknown config key {key!r}")
        self.values[key] = _coerce(key, raw)

    def section(self, name: str) -> dict[str, Any]:
        prefix = name + "."
        return {k[len(prefix):]: v for k, v in self.values.items() if k.startswith(prefix)}

    @property
    def seed(self) -> int:
        return self.values["run.seed"]

    def snapshot(self) -> str:
        """Effective configuration as an INI document that ``load`` reads back unchanged."""
        lines, current = [], None
        for key in SCHEMA:
            sec, name = key.split(".", 1)
            if sec != current:
                lines += [""] if current else []
                lines.append(f"[{sec}]")
                current = sec
            lines.append(f"{name} = {_render(self.values[key])}")
        lines.append("")
        return "\n".join(lines)


def load(path: str | Path | None = None, overrides: Iterable[str] = ()) -> RunConfig:
    cfg = RunConfig()
    if path is not None:
        parser = configparser.ConfigParser(interpolation=None)
        try:
            with open(path) as fh:
                parser.read_file(fh)
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc.strerror}") from None
        except configparser.Error as exc:
            raise ConfigError(f"malformed config {path}: {exc.message}") from None
        for sec in parser.sections():
            for name, raw in parser.items(sec):
                cfg.set(f"{sec}.{name}", raw)
    for item in overrides:
        key, sep, raw = item.partition("=")
        if not sep:
            raise ConfigError(f"--set expects key=value, got {item!r}")
        cfg.set(key.strip(), raw)
    return cfg
