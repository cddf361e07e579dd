"""Command-line front end.  Every subcommand works inside one run directory.

The run directory is ``$STPROMPT_RUNS/<run>`` (``./runs`` when the variable is
unset).  Failures print one line ``error<TAB>code=<n><TAB>kind=<type><TAB>message=<text>``
on stderr and exit 2 (config), 3 (data) or 4 (contract violation).
"""

from __future__ import annotations

import argparse
import contextlib
import csv
import logging
import os
import sys
from concurrent.futures import ProcessPoolExecutor
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import config as config_mod
from .backbone import BackboneConfig, BackboneModel, tiny_grad_check
from .diffengine import CheckpointError, check_registered, load_checkpoint, save_checkpoint
from .errors import ConfigError, ContractViolation, DataError
from .graph import SensorGraph, kernel_adjacency, read_adjacency, read_edge_list, write_adjacency
from .pipeline.phases import (ForecastTask, PhaseResult, TrainConfig, evaluate_split, finetune_all, freeze,
                              predict, pretrain, prompt_tune, scratch_train, trainable_copy)
from .prompt import PromptConfig, PromptNet, edit_magnitude
from .shiftlab.bench import ARMS, BenchReport, BenchSetup, run_bench
from .shiftlab.measure import marginal_w1
from .shiftlab.synthetic import ShiftSpec, SyntheticSpec, apply_shift, gen_synthetic
from .stdata import (StTensor, impute_missing, load_readings, normalize, remove_anomalies, split_chronological,
                     write_readings)

log = logging.getLogger("stprompt")

EXIT_CODES = {ConfigError: 2, DataError: 3, ContractViolation: 4}
RUNS_ENV = "STPROMPT_RUNS"
GRAD_TOL = 1e-4

READINGS = "readings.csv"
SHIFTED = "readings_shifted.csv"
ADJACENCY = "adjacency.csv"
DIGEST = "digest.txt"
TUNE_MODES = ("prompt", "finetune", "scratch")


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise ConfigError(message)


# -- run context -------------------------------------------------------------

class Run:
    def __init__(self, args):
        root = Path(os.environ.get(RUNS_ENV, "runs"))
        self.dir = root / args.run
        self.dir.mkdir(parents=True, exist_ok=True)
        self.cfg = config_mod.load(args.config, args.set or ())
        if getattr(args, "seed", None) is not None:
            self.cfg.set("run.seed", args.seed)
        self.command = args.command

    def path(self, name: str) -> Path:
        return self.dir / name

    def need(self, name: str) -> Path:
        p = self.path(name)
        if not p.exists():
            raise DataError(f"{p} not found; run the producing subcommand first")
        return p

    def snapshot(self, tag: str) -> None:
        self.path(f"config_{tag}.ini").write_text(self.cfg.snapshot())

    def threads(self):
        if not self.cfg["run.single_thread"]:
            return contextlib.nullcontext()
        from threadpoolctl import threadpool_limits
        return threadpool_limits(1)


def _train_config(cfg, section: str) -> TrainConfig:
    s = cfg.section(section)
    kw = dict(lr=s["lr"], epochs=s["epochs"], patience=s["patience"], optimizer=s["optimizer"],
              batch_size=s["batch_size"], weight_decay=s["weight_decay"], seed=cfg.seed)
    if section == "pretrain":
        kw.update(curriculum=s["curriculum"], partitions=s["partitions"])
    else:
        kw.update(curriculum=False, min_delta=s["min_delta"], max_steps=s["max_steps"] or None)
    return TrainConfig(**kw)


def _load_series(path: Path, graph: SensorGraph | None = None) -> StTensor:
    raw = load_readings(path)
    if raw.n_missing:
        return impute_missing(raw, graph)
    return StTensor(raw.values, sensor_ids=raw.sensor_ids, timestamps=raw.timestamps, feature_names=raw.feature_names)


def _graph(run: Run, ids) -> SensorGraph | None:
    p = run.path(ADJACENCY)
    return read_adjacency(p, [str(i) for i in ids]) if p.exists() else None


def _tasks(run: Run) -> tuple[StTensor, ForecastTask, ForecastTask, SensorGraph | None]:
    """(clean series, clean task, tuning task); the tuning task reads shifted inputs when present."""
    data = _load_series(run.need(READINGS))
    graph = _graph(run, data.sensor_ids)
    c = run.cfg
    splits = split_chronological(data, c["data.f_train"], c["data.f_val"], 1 - c["data.f_train"] - c["data.f_val"],
                                 tun_tail=c["data.tun_tail"])
    norm = normalize(data)
    L = dict(L_in=c["data.window_in"], L_out=c["data.window_out"])
    clean = ForecastTask(norm.data, norm.data, splits, norm.mean, norm.std, **L)
    tune = clean
    if run.path(SHIFTED).exists():
        shifted = _load_series(run.path(SHIFTED))
        if shifted.shape != data.shape:
            raise DataError("shifted readings do not match the clean readings in shape")
        tune = ForecastTask((shifted.data - norm.mean) / norm.std, norm.data, splits, norm.mean, norm.std, **L)
    return data, clean, tune, graph


def _backbone(run: Run, n_nodes: int, graph: SensorGraph | None) -> BackboneModel:
    s = run.cfg.section("backbone")
    c = run.cfg
    cfg = BackboneConfig(n_nodes=n_nodes, d_hidden=s["d_hidden"], d_skip=s["d_skip"], d_embed=s["d_embed"],
                         layers=s["layers"], topk=s["topk"], learn_graph=s["learn_graph"],
                         history=c["data.window_in"], horizon=c["data.window_out"])
    static = graph.adjacency if graph is not None and not cfg.learn_graph else None
    if not cfg.learn_graph and static is None:
        raise DataError("backbone.learn_graph is false but the run has no adjacency.csv")
    return BackboneModel(cfg, seed=run.cfg.seed, static_adjacency=static)


def _prompt(run: Run, n_features: int) -> PromptNet:
    s = run.cfg.section("prompt")
    return PromptNet(PromptConfig(n_features=n_features, d_hidden=s["d_hidden"], dropout=s["dropout"],
                                  window=run.cfg["data.window_in"]), seed=run.cfg.seed)


def _load_into(store, path: Path) -> None:
    try:
        saved = load_checkpoint(path)
        store.load_state({n: t.data for n, t in saved.items()})
    except (CheckpointError, KeyError, ValueError) as exc:
        raise DataError(f"{path}: {exc}") from None


def _frozen_backbone(run: Run, data: StTensor, graph) -> tuple[BackboneModel, str]:
    model = _backbone(run, data.shape[0], graph)
    _load_into(model.params, run.need("pretrain.ckpt"))
    model, digest = freeze(model)
    recorded = run.need(DIGEST).read_text().strip()
    if recorded != digest:
        raise ContractViolation(f"pretrain.ckpt digest {digest[:12]} does not match the recorded {recorded[:12]}")
    return model, digest


def _write_logs(run: Run, tag: str, res: PhaseResult) -> None:
    """Deterministic metrics log plus a separate wall-clock log."""
    with open(run.path(f"metrics_{tag}.tsv"), "w", newline="") as fh:
        w = csv.writer(fh, delimiter="\t")
        w.writerow(["epoch", "split", "train_loss", "mae", "rmse", "mape"])
        for r in res.history:
            w.writerow([r.epoch, r.split, repr(r.train_loss), repr(r.mae), repr(r.rmse), repr(r.mape)])
    with open(run.path(f"timing_{tag}.tsv"), "w", newline="") as fh:
        w = csv.writer(fh, delimiter="\t")
        w.writerow(["epoch", "seconds"])
        w.writerows([r.epoch, f"{r.seconds:.6f}"] for r in res.history)
        w.writerow(["total", f"{res.seconds:.6f}"])
    with open(run.path(f"summary_{tag}.tsv"), "w", newline="") as fh:
        w = csv.writer(fh, delimiter="\t")
        w.writerow(["phase", "steps", "best_epoch", "best_val", "trainable_params", "state_bytes", "diverged",
                    "batch_digest"])
        w.writerow([res.phase, res.steps, res.best_epoch, repr(res.best_val), res.trainable_params,
                    res.optimizer_state_bytes, int(res.diverged), res.batch_digest])


# -- subcommands ---------------------------------------------------------------

def cmd_ingest(run: Run, args) -> None:
    raw = load_readings(args.readings)
    graph = None
    if args.edges:
        graph = kernel_adjacency(read_edge_list(args.edges), sigma2=run.cfg["data.sigma2"],
                                 node_ids=[str(s) for s in raw.sensor_ids])
    data = impute_missing(raw, graph, decay=run.cfg["data.impute_decay"], window=run.cfg["data.impute_window"])
    cleaned, mask = remove_anomalies(data, z_thresh=run.cfg["data.anomaly_z"], graph=graph,
                                     decay=run.cfg["data.impute_decay"], window=run.cfg["data.impute_window"])
    write_readings(cleaned, run.path(READINGS))
    if graph is not None:
        write_adjacency(graph, run.path(ADJACENCY))
    mask.to_csv(run.path("anomalies.csv"), cleaned.sensor_ids, cleaned.timestamps, cleaned.feature_names)
    with open(run.path("ingest.tsv"), "w", newline="") as fh:
        w = csv.writer(fh, delimiter="\t")
        w.writerow(["sensors", "steps", "features", "imputed", "anomalies"])
        w.writerow([*cleaned.shape, raw.n_missing, mask.count])
    run.snapshot("ingest")


def cmd_shiftgen(run: Run, args) -> None:
    s = run.cfg.section("synthetic")
    spec = SyntheticSpec(n_nodes=s["nodes"], n_steps=s["steps"], period=s["period"], noise_std=s["noise"],
                         coupling=s["coupling"], graph=s["graph"], seed=run.cfg.seed)
    data, graph = gen_synthetic(spec)
    data = replace(data, sensor_ids=[str(i) for i in range(spec.n_nodes)])
    graph = SensorGraph(graph.adjacency, tuple(data.sensor_ids))
    splits = split_chronological(data, run.cfg["data.f_train"], run.cfg["data.f_val"],
                                 1 - run.cfg["data.f_train"] - run.cfg["data.f_val"], tun_tail=run.cfg["data.tun_tail"])
    sh = run.cfg.section("shift")
    shift = ShiftSpec(sh["kind"], lag=sh["lag"], scale=sh["scale"], start=splits.tun.start)
    shifted = apply_shift(data, shift)
    write_readings(data, run.path(READINGS))
    write_readings(shifted, run.path(SHIFTED))
    write_adjacency(graph, run.path(ADJACENCY))
    pre = data.data[:, splits.pre]
    tun = shifted.data[:, splits.tun]
    with open(run.path("shift.tsv"), "w", newline="") as fh:
        w = csv.writer(fh, delimiter="\t")
        w.writerow(["kind", "lag", "scale", "start", "marginal_w1"])
        w.writerow([shift.kind, shift.lag, shift.scale, shift.start, repr(marginal_w1(pre, tun))])
    run.snapshot("shiftgen")


def cmd_pretrain(run: Run, args) -> None:
    data, clean, _, graph = _tasks(run)
    model = _backbone(run, data.shape[0], graph)
    res = pretrain(model, clean, _train_config(run.cfg, "pretrain"))
    model, digest = freeze(model)
    save_checkpoint(model.params, run.path("pretrain.ckpt"))
    run.path(DIGEST).write_text(digest + "\n")
    _write_logs(run, "pretrain", res)
    run.snapshot("pretrain")


def cmd_tune(run: Run, args) -> None:
    data, _, task, graph = _tasks(run)
    model, digest = _frozen_backbone(run, data, graph)
    cfg = _train_config(run.cfg, "tune")
    if args.mode == "prompt":
        prompt = _prompt(run, data.shape[2])
        res = prompt_tune(prompt, model, task, cfg, digest)
        store = prompt.params
    elif args.mode == "finetune":
        copy = trainable_copy(model)
        res = finetune_all(copy, task, cfg)
        store = copy.params
    else:
        fresh = _backbone(run, data.shape[0], graph)
        res = scratch_train(fresh, task, cfg)
        store = fresh.params
    save_checkpoint(store, run.path(f"{args.mode}.ckpt"))
    _write_logs(run, args.mode, res)
    run.snapshot(f"tune_{args.mode}")


def _models(run: Run, data, graph, modes):
    """(model, prompt) pairs for each requested mode whose checkpoint exists."""
    model, _ = _frozen_backbone(run, data, graph)
    out = {}
    for mode in modes:
        if mode == "frozen":
            out[mode] = (model, None)
        elif mode == "prompt":
            prompt = _prompt(run, data.shape[2])
            _load_into(prompt.params, run.need("prompt.ckpt"))
            out[mode] = (model, prompt)
        else:
            other = _backbone(run, data.shape[0], graph)
            _load_into(other.params, run.need(f"{mode}.ckpt"))
            out[mode] = (other, None)
    return out


def cmd_predict(run: Run, args) -> None:
    data, _, task, graph = _tasks(run)
    model, prompt = _models(run, data, graph, [args.mode])[args.mode]
    x, _ = task.windows(args.split)
    y_hat = predict(model, prompt, x, task.mean, task.std)
    B, R, Q, F = y_hat.shape
    idx = np.indices(y_hat.shape).reshape(4, -1)
    ids = np.asarray(data.sensor_ids, dtype=object)
    with open(run.path(f"predictions_{args.mode}_{args.split}.csv"), "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["window", "sensor_id", "horizon", "feature", "value"])
        for (b, r, q, f), v in zip(idx.T, y_hat.ravel()):
            w.writerow([b, ids[r], q + 1, f, repr(float(v))])


def cmd_eval(run: Run, args) -> None:
    data, _, task, graph = _tasks(run)
    modes = [m for m in ("frozen", *TUNE_MODES) if m == "frozen" or run.path(f"{m}.ckpt").exists()]
    reports = {m: evaluate_split(mod, pr, task, args.split) for m, (mod, pr) in _models(run, data, graph, modes).items()}
    with open(run.path(f"eval_{args.split}.csv"), "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["model", "scope", "horizon", "node", "metric", "value"])
        for m, rep in reports.items():
            w.writerows([m, *row] for row in rep.rows())
    for m, rep in reports.items():
        print(f"{m}\tmae={rep.mae:.6g}\trmse={rep.rmse:.6g}\tmape={rep.mape:.6g}")
    if args.plot:
        from . import plotting
        plotting.per_horizon({m: r.per_horizon for m, r in reports.items()}, run.path(f"eval_{args.split}_horizon.png"))
        curves = {}
        for m in ("pretrain", *TUNE_MODES):
            p = run.path(f"metrics_{m}.tsv")
            if p.exists():
                with open(p) as fh:
                    curves[m] = [float(r["mae"]) for r in csv.DictReader(fh, delimiter="\t")]
        if curves:
            plotting.learning_curves(curves, run.path("learning_curves.png"))


def _parse_ints(text: str, name: str) -> list[int]:
    try:
        vals = [int(v) for v in str(text).split(",") if v.strip()]
    except ValueError:
        raise ConfigError(f"{name} must be a comma separated list of integers") from None
    if not vals or min(vals) < 1:
        raise ConfigError(f"{name} needs positive integers")
    return vals


def _bench_one(job):
    arms, scale, seed, setup, mode = job
    return run_bench(arms, (scale,), (seed,), setup, mode)


def bench_setup(cfg) -> BenchSetup:
    sh = cfg.section("shift")
    return BenchSetup(
        n_steps=cfg["synthetic.steps"], tun_tail=cfg["data.tun_tail"], period=cfg["synthetic.period"],
        d_hidden=cfg["backbone.d_hidden"], d_skip=cfg["backbone.d_skip"], d_embed=cfg["backbone.d_embed"],
        layers=cfg["backbone.layers"], prompt_hidden=cfg["prompt.d_hidden"],
        pretrain=_train_config(cfg, "pretrain"), tune=_train_config(cfg, "tune"),
        shift=ShiftSpec(sh["kind"], lag=sh["lag"], scale=sh["scale"]),
    )


def cmd_bench(run: Run, args) -> None:
    if args.scales:
        run.cfg.set("bench.scales", args.scales)
    if args.seeds:
        run.cfg.set("bench.seeds", args.seeds)
    if args.arms:
        run.cfg.set("bench.arms", args.arms)
    arms = [a.strip() for a in run.cfg["bench.arms"].split(",") if a.strip()]
    if not arms or set(arms) - set(ARMS):
        raise ConfigError(f"bench.arms must name a subset of {','.join(ARMS)}")
    scales = _parse_ints(run.cfg["bench.scales"], "bench.scales")
    n_seeds = run.cfg["bench.seeds"]
    if n_seeds < 1:
        raise ConfigError("bench.seeds must be >= 1")
    seeds = [run.cfg.seed + k for k in range(n_seeds)]
    mode = "count" if args.count_only else "train"
    setup = bench_setup(run.cfg)
    jobs = [(arms, s, k, setup, mode) for s in scales for k in seeds]
    if args.parallel > 1:
        with ProcessPoolExecutor(args.parallel) as pool:
            parts = list(pool.map(_bench_one, jobs))
    else:
        parts = [_bench_one(j) for j in jobs]
    report = BenchReport([r for p in parts for r in p.rows],
                         {k: v for p in parts for k, v in p.backbone_params.items()}, mode,
                         "single" if run.cfg["run.single_thread"] else "default")
    report.write(run.path("bench_rows.tsv"), run.path("bench_ratios.tsv"))
    with open(run.path("bench_mode.tsv"), "w") as fh:
        fh.write(f"mode\tthreads\tparallel\n{mode}\t{report.threads}\t{args.parallel}\n")
    if mode == "train":
        print(f"prompt/finetune wall-clock ratio\t{report.time_ratio():.4f}")
    if args.plot:
        from . import plotting
        plotting.bench_summary(report, run.path("bench.png"))
    run.snapshot("bench")


def cmd_gradcheck(run: Run, args) -> None:
    results = check_registered(points=args.points, seed=run.cfg.seed)
    results["tiny_model"] = tiny_grad_check(seed=run.cfg.seed)
    worst = 0.0
    with open(run.path("gradcheck.tsv"), "w", newline="") as fh:
        w = csv.writer(fh, delimiter="\t")
        w.writerow(["op", "max_rel_error", "checked", "kinks", "passed"])
        for name, rep in results.items():
            w.writerow([name, f"{rep.max_rel_error:.3e}", rep.n_checked, len(rep.kinks), int(rep.passed(GRAD_TOL))])
            worst = max(worst, rep.max_rel_error)
    print(f"gradcheck\tops={len(results)}\tworst={worst:.3e}\ttol={GRAD_TOL:g}")
    if worst >= GRAD_TOL:
        raise ContractViolation(f"finite-difference error {worst:.3e} exceeds {GRAD_TOL:g}")


def cmd_inspect(run: Run, args) -> None:
    data, _, task, graph = _tasks(run)
    if args.what == "prompt":
        prompt = _prompt(run, data.shape[2])
        if run.path("prompt.ckpt").exists():
            _load_into(prompt.params, run.path("prompt.ckpt"))
        rows = prompt.describe()
        x, _ = task.windows(args.split)
        print(f"edit_magnitude\t{edit_magnitude(prompt, x[:args.batch]):.6g}")
    else:
        model = _backbone(run, data.shape[0], graph)
        if run.path("pretrain.ckpt").exists():
            _load_into(model.params, run.path("pretrain.ckpt"))
        rows = [(n, t.shape, int(np.prod(t.shape))) for n, t in model.params.items()]
    for name, shape, count in rows:
        print(f"{name}\t{'x'.join(map(str, shape)) or 'scalar'}\t{count}")
    print(f"total\t\t{sum(r[2] for r in rows)}")


COMMANDS = {
    "ingest": cmd_ingest, "shiftgen": cmd_shiftgen, "pretrain": cmd_pretrain, "tune": cmd_tune,
    "predict": cmd_predict, "eval": cmd_eval, "bench": cmd_bench, "gradcheck": cmd_gradcheck,
    "inspect": cmd_inspect,
}
SEEDED = {"pretrain", "tune", "bench", "shiftgen"}


def build_parser() -> argparse.ArgumentParser:
    common = _Parser(add_help=False)
    common.add_argument("--run", default="default", help="run directory name under $STPROMPT_RUNS")
    common.add_argument("--config", help="INI file with section.key values")
    common.add_argument("--set", action="append", metavar="KEY=VALUE", help="override one config key")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = _Parser(prog="stprompt", description="Prompt tuning for frozen spatio-temporal forecasters.")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def add(name, help_, seed_required=False):
        p = sub.add_parser(name, parents=[common], help=help_)
        p.add_argument("--seed", type=int, required=seed_required, default=None)
        return p

    p = add("ingest", "clean raw readings into the run directory")
    p.add_argument("--readings", required=True)
    p.add_argument("--edges", help="src,dst,distance edge list")
    add("shiftgen", "write a synthetic network and its shifted copy", seed_required=True)
    add("pretrain", "train and freeze the backbone", seed_required=True)
    p = add("tune", "adapt to the tuning slice", seed_required=True)
    p.add_argument("--mode", choices=TUNE_MODES, default="prompt")
    for name in ("predict", "eval"):
        p = add(name, "forecast the chosen split" if name == "predict" else "score every trained model")
        p.add_argument("--split", choices=("val", "tst", "tun"), default="tst")
        if name == "predict":
            p.add_argument("--mode", choices=("frozen", *TUNE_MODES), default="prompt")
        else:
            p.add_argument("--plot", action="store_true", help="also render figures")
    p = add("bench", "compare adaptation arms across graph scales", seed_required=True)
    p.add_argument("--scales")
    p.add_argument("--seeds", type=int)
    p.add_argument("--arms")
    p.add_argument("--count-only", action="store_true", help="report sizes without training")
    p.add_argument("--parallel", type=int, default=1, help="worker processes, one (scale, seed) each")
    p.add_argument("--plot", action="store_true")
    p = add("gradcheck", "finite-difference check of every registered op and a tiny model")
    p.add_argument("--points", type=int, default=20)
    p = add("inspect", "print parameter shapes and counts")
    p.add_argument("what", choices=("prompt", "backbone"))
    p.add_argument("--split", choices=("val", "tst", "tun"), default="tst")
    p.add_argument("--batch", type=int, default=32)
    return parser


def _fail(exc: BaseException, code: int) -> int:
    msg = " ".join(str(exc).split()) or type(exc).__name__
    print(f"error\tcode={code}\tkind={type(exc).__name__}\tmessage={msg}", file=sys.stderr)
    return code


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                            format="%(levelname)s %(name)s: %(message)s")
        run = Run(args)
        with run.threads():
            COMMANDS[args.command](run, args)
    except tuple(EXIT_CODES) as exc:
        return _fail(exc, next(c for t, c in EXIT_CODES.items() if isinstance(exc, t)))
    except CheckpointError as exc:
        return _fail(exc, 3)
    return 0


if __name__ == "__main__":
    sys.exit(main())
