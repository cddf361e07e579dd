import csv

import pytest

from stprompt import config
from stprompt.cli import RUNS_ENV, main
from stprompt.errors import ConfigError

FAST = ["--set", "synthetic.steps=700", "--set", "data.tun_tail=150", "--set", "backbone.d_hidden=8",
        "--set", "backbone.d_skip=8", "--set", "backbone.layers=1", "--set", "synthetic.nodes=4"]


@pytest.fixture
def runs(tmp_path, monkeypatch):
    monkeypatch.setenv(RUNS_ENV, str(tmp_path))
    return tmp_path


def read_tsv(path):
    with open(path) as fh:
        return list(csv.DictReader(fh, delimiter="\t"))


def test_config_snapshot_round_trip(tmp_path):
    cfg = config.load(overrides=["tune.lr=0.05", "pretrain.curriculum=yes", "bench.scales=10,100"])
    path = tmp_path / "c.ini"
    path.write_text(cfg.snapshot())
    assert config.load(path).values == cfg.values
    assert cfg["tune.lr"] == 0.05 and cfg["pretrain.curriculum"] is True


def test_config_rejects_unknown_and_malformed(tmp_path):
    with pytest.raises(ConfigError):
        config.load(overrides=["tune.speed=1"])
    with pytest.raises(ConfigError):
        config.load(overrides=["tune.lr"])
    with pytest.raises(ConfigError):
        config.load(overrides=["tune.epochs=many"])
    bad = tmp_path / "bad.ini"
    bad.write_text("[tune]\nwobble = 3\n")
    with pytest.raises(ConfigError):
        config.load(bad)


def test_exit_codes(runs, capsys):
    assert main(["pretrain"]) == 2
    assert main(["shiftgen", "--seed", "0", "--set", "nope.key=1"]) == 2
    assert main(["pretrain", "--seed", "0", "--run", "empty"]) == 3
    assert main(["ingest", "--readings", str(runs / "missing.csv")]) == 3
    err = capsys.readouterr().err
    assert "error\tcode=3" in err and "error\tcode=2" in err


def test_full_run_and_tampered_digest(runs, capsys):
    seed = ["--seed", "1", *FAST]
    assert main(["shiftgen", *seed]) == 0
    assert main(["pretrain", *seed, "--set", "pretrain.epochs=2"]) == 0
    assert main(["tune", *seed, "--mode", "prompt", "--set", "tune.epochs=1"]) == 0
    assert main(["predict", *FAST, "--mode", "prompt", "--split", "tst"]) == 0
    assert main(["eval", *FAST, "--split", "tst", "--plot"]) == 0
    capsys.readouterr()
    assert main(["inspect", "prompt", *FAST]) == 0
    assert "total\t\t207" in capsys.readouterr().out
    run = runs / "default"
    for name in ("readings.csv", "readings_shifted.csv", "adjacency.csv", "shift.tsv", "pretrain.ckpt", "digest.txt",
                 "prompt.ckpt", "metrics_prompt.tsv", "timing_prompt.tsv", "config_pretrain.ini",
                 "predictions_prompt_tst.csv", "eval_tst.csv", "eval_tst_horizon.png", "learning_curves.png"):
        assert (run / name).exists(), name
    snap = config.load(run / "config_pretrain.ini")
    assert snap["pretrain.epochs"] == 2 and snap["run.seed"] == 1
    assert "seconds" not in (run / "metrics_prompt.tsv").read_text()

    (run / "digest.txt").write_text("0" * 64 + "\n")
    assert main(["tune", *seed, "--mode", "prompt", "--set", "tune.epochs=1"]) == 4


def test_ingest(runs):
    readings = runs / "in.csv"
    readings.write_text("sensor_id,timestamp,speed\n"
                        + "".join(f"{s},{t},{'' if (s, t) == ('b', 3) else 60 + t % 5}\n"
                                  for s in "abc" for t in range(30)))
    edges = runs / "edges.csv"
    edges.write_text("src,dst,distance\na,b,1.0\nb,c,2.0\nc,b,2.0\nb,a,1.0\n")
    assert main(["ingest", "--readings", str(readings), "--edges", str(edges), "--run", "ing",
                 "--set", "data.impute_window=10"]) == 0
    summary = read_tsv(runs / "ing" / "ingest.tsv")
    assert summary
    assert "b,3," in (runs / "ing" / "readings.csv").read_text()


def test_bench_count_only_cardinality(runs):
    assert main(["bench", "--seed", "0", "--seeds", "2", "--scales", "10,100,1000", "--count-only"]) == 0
    ratios = read_tsv(runs / "default" / "bench_ratios.tsv")
    rows = read_tsv(runs / "default" / "bench_rows.tsv")
    assert len(rows) == len(ratios) == 3 * 2 * 3
    prompt_params = {r["params"] for r in rows if r["arm"] == "prompt"}
    assert prompt_params == {"207"}


def test_gradcheck_command(runs):
    assert main(["gradcheck", "--points", "5"]) == 0
    rows = read_tsv(runs / "default" / "gradcheck.tsv")
    assert rows and all(float(r["max_rel_error"]) < 1e-4 for r in rows)
