import json
import os

import numpy as np
import pytest

from metasel import cli, data, experiments

STAGES = ["gen-data", "corrupt", "warmup", "featurize", "select", "reweight", "eval", "verify"]

TINY = {"dataset": {"kind": "toy", "n": 300},
        "corruption": {"kind": "uniform", "percent": 50},
        "train": {"epochs": 5, "batch_size": 50, "hidden": [8, 8], "momentum": 0.8},
        "selection": {"method": "rbc", "budget": 5, "m0": 2, "k_checkpoints": 2},
        "methods": ["random", "rbc"], "seeds": [0]}


def write_config(path, doc=TINY, **over):
    doc = json.loads(json.dumps(doc))
    for k, v in over.items():
        doc[k] = v
    path.write_text(json.dumps(doc))
    return str(path)


def run(cfg, out, *stages, seed=None):
    extra = [] if seed is None else ["--seed", str(seed)]
    codes = [cli.main([s, "--config", cfg, "--out", str(out)] + extra) for s in stages]
    return codes


def test_full_pipeline(tmp_path):
    cfg = write_config(tmp_path / "c.json")
    out = tmp_path / "run"
    assert run(cfg, out, *STAGES) == [0] * len(STAGES)
    for f in ("dataset.csv", "corrupted.csv", "corruption.json", "features.bin",
              "selection.csv", "eval.json", "verify.json", "manifest.json"):
        assert (out / f).exists(), f
    assert len(data.load_dataset(out / "dataset.csv")) == 300
    ev = json.loads((out / "eval.json").read_text())
    assert ev["meta_size"] == 5 and 0 <= ev["test_accuracy"] <= 1
    assert 0 <= ev["weights"]["auc"] <= 1
    ver = json.loads((out / "verify.json").read_text())
    assert ver["passed"] and all(ver["checks"].values())
    assert set(ver["d_statistics"]) == {"min", "5%-quantile", "inf_count", "n"}
    assert experiments.verify_manifest(out) == []
    manifest = json.loads((out / "manifest.json").read_text())
    assert "warmup/checkpoints.npz" in manifest["files"] and manifest["seed"] == 0


def test_gen_data_default_toy(tmp_path):
    cfg = write_config(tmp_path / "c.json", {"dataset": {"kind": "toy"}})
    assert run(cfg, tmp_path / "o", "gen-data") == [0]
    ds = data.load_dataset(tmp_path / "o" / "dataset.csv")
    assert len(ds) == 1000 and len(ds.indices("train")) == 600


def test_stage_ordering_error(tmp_path, capsys):
    cfg = write_config(tmp_path / "c.json")
    assert run(cfg, tmp_path / "o", "select") == [3]
    err = capsys.readouterr().err
    assert err.startswith("metasel: error:") and "missing input" in err
    assert "run 'corrupt' first" in err
    run(cfg, tmp_path / "o", "gen-data", "corrupt", "warmup")
    assert run(cfg, tmp_path / "o", "select") == [3]
    assert "run 'featurize' first" in capsys.readouterr().err


def test_config_errors(tmp_path, capsys):
    bad = tmp_path / "bad.json"
    bad.write_text('{"selection": {"budjet": 3}}')
    assert cli.main(["gen-data", "--config", str(bad), "--out", str(tmp_path / "o")]) == 2
    assert "unknown keys" in capsys.readouterr().err
    assert cli.main(["gen-data", "--config", str(tmp_path / "none.json")]) == 3


def test_featurize_rejects_baseline(tmp_path):
    cfg = write_config(tmp_path / "c.json", selection={"method": "random", "budget": 5, "m0": 2})
    out = tmp_path / "o"
    assert run(cfg, out, "gen-data", "corrupt", "warmup", "featurize") == [0, 0, 0, 2]
    assert run(cfg, out, "select", "reweight", "eval") == [0, 0, 0]


def test_pipeline_byte_identical(tmp_path):
    cfg = write_config(tmp_path / "c.json")
    a, b = tmp_path / "a", tmp_path / "b"
    run(cfg, a, *STAGES, seed=3)
    run(cfg, b, *STAGES, seed=3)
    for f in ("corrupted.csv", "features.bin", "selection.csv", "eval.json", "verify.json",
              "final/weights.csv"):
        assert (a / f).read_bytes() == (b / f).read_bytes(), f
    ma = json.loads((a / "manifest.json").read_text())["files"]
    mb = json.loads((b / "manifest.json").read_text())["files"]
    assert ma == mb


def test_experiment_grid_and_tables(tmp_path, capsys):
    cfg = write_config(tmp_path / "c.json", seeds=[0, 1, 2, 3, 4])
    assert run(cfg, tmp_path / "e", "experiment") == [0]
    printed = capsys.readouterr().out
    summary = (tmp_path / "e" / "summary.csv").read_text()
    assert printed == summary
    lines = summary.splitlines()
    assert lines[0] == "method,test_accuracy,weight_auc,meta_size"
    assert [l.split(",")[0] for l in lines[1:]] == ["random", "rbc"]
    assert all("+-" in cell for l in lines[1:] for cell in l.split(",")[1:])
    rows = (tmp_path / "e" / "results.csv").read_text().splitlines()[1:]
    acc = [r for r in rows if ",test_accuracy," in r]
    assert len(acc) == 10
    assert experiments.verify_manifest(tmp_path / "e") == []
    assert run(cfg, tmp_path / "f", "experiment") == [0]
    for f in ("results.csv", "summary.csv"):
        assert (tmp_path / "e" / f).read_bytes() == (tmp_path / "f" / f).read_bytes()


def test_experiment_single_seed_std_zero(tmp_path):
    cfg = write_config(tmp_path / "c.json", methods=["random"])
    from metasel import config
    rep = experiments.run_experiment(config.load(cfg))
    mean, std, n = rep.summary()["random"]["test_accuracy"]
    assert n == 1 and std == 0.0 and mean == rep.values("random", "test_accuracy")[0]


def test_experiment_records_failed_cells(tmp_path):
    from metasel import config
    cfg = config.from_dict({**TINY, "selection": {"method": "rbc", "budget": 5, "m0": 2,
                                                  "k_checkpoints": 2, "keep_fraction": 0.01},
                            "methods": ["rbc", "random"]})
    rep = experiments.run_experiment(cfg)
    failed = [c for c in rep.cells if c.error]
    assert [c.method for c in failed] == ["rbc"] and "survive" in failed[0].error
    assert "rbc" in rep.table() and "missing" in rep.table().splitlines()[1]


def test_manifest_detects_tampering(tmp_path):
    cfg = write_config(tmp_path / "c.json")
    out = tmp_path / "o"
    run(cfg, out, "gen-data")
    with open(out / "dataset.csv", "a") as fh:
        fh.write("tampered\n")
    assert experiments.verify_manifest(out) == ["dataset.csv"]


def test_thread_override_env(tmp_path):
    import subprocess
    import sys
    env = dict(os.environ, METASEL_THREADS="1")
    out = subprocess.run([sys.executable, "-m", "metasel.cli", "gen-data", "--config",
                          write_config(tmp_path / "c.json"), "--out", str(tmp_path / "o")],
                         env=env, capture_output=True, text=True)
    assert out.returncode == 0, out.stderr
