import csv
import json
import subprocess
import sys

import pytest

from csac.cli import ExperimentSpec, cmd_prepare_data, load_spec, main
from csac.errors import ConfigError

SYNTH = {"kind": "synthetic", "H": 3, "C": 4, "shift": 1.0, "seed": 1,
         "n_train_per_class": 8, "n_test_per_class": 4}
FAST = {"acquisition_epochs": 1, "rounds": 1, "calibration_epochs": 1, "batch_size": 16,
        "eval_sources": False}


@pytest.fixture
def env(tmp_path, monkeypatch):
    monkeypatch.setenv("CSAC_DATA_DIR", str(tmp_path / "data"))
    cfg = tmp_path / "exp.json"
    cfg.write_text(json.dumps({"dataset": SYNTH, "target": "S2", "training": FAST,
                               "out": str(tmp_path / "out")}))
    return tmp_path, cfg


def _run(*args):
    return main([str(a) for a in args])


def test_precedence_flags_over_file_over_defaults(env):
    tmp, cfg = env
    spec = load_spec(cfg)
    assert spec.training_config().rounds == 1          # file beats default 40
    assert spec.training_config().lam == 0.6           # default kept
    spec = load_spec(cfg, rounds=3, lam=0.2, method="fedavg", seeds=[4, 5])
    assert spec.training_config().rounds == 3 and spec.training_config().lam == 0.2
    assert spec.method == "fedavg" and spec.seeds == [4, 5]


def test_spec_validation():
    with pytest.raises(ConfigError):
        ExperimentSpec(method="fedprox")
    with pytest.raises(ConfigError):
        ExperimentSpec(seeds=[])
    with pytest.raises(ConfigError):
        ExperimentSpec(dataset={"kind": "pacs"})
    with pytest.raises(ConfigError):
        ExperimentSpec(training={"rounds": -2})


def test_prepare_is_idempotent_and_deterministic(env):
    tmp, cfg = env
    assert _run("prepare-data", "--config", cfg) == 0
    root = load_spec(cfg).data_dir()
    assert sorted(p.name for p in root.iterdir() if p.is_dir()) == ["S0", "S1", "S2"]
    stamp = {p: p.stat().st_mtime_ns for p in root.rglob("*") if p.is_file()}
    assert cmd_prepare_data(load_spec(cfg)) == root
    assert stamp == {p: p.stat().st_mtime_ns for p in root.rglob("*") if p.is_file()}
    manifest = json.loads((root / "S0" / "manifest.json").read_text())
    assert manifest["split_sizes"] == {"train": 32, "test": 16}


def test_rotated_mnist_prepare_makes_six_domains(tmp_path, monkeypatch):
    pytest.importorskip("mlxtend")
    monkeypatch.setenv("CSAC_DATA_DIR", str(tmp_path))
    spec = ExperimentSpec(dataset={"kind": "rotated-mnist", "per_class": 5, "test_per_class": 5})
    root = cmd_prepare_data(spec)
    dirs = sorted(p.name for p in root.iterdir() if p.is_dir())
    assert dirs == sorted(["M0", "M15", "M30", "M45", "M60", "M75"])
    assert json.loads((root / "M45" / "manifest.json").read_text())["angle"] == 45


def test_run_without_prepared_data_fails(env, capsys):
    tmp, cfg = env
    assert _run("run", "--config", cfg) == 2
    assert "error[E_DATA_MISSING]" in capsys.readouterr().err


def test_run_writes_results(env):
    tmp, cfg = env
    _run("prepare-data", "--config", cfg)
    assert _run("run", "--config", cfg, "--seeds", "0") == 0
    out = tmp / "out" / "csac-S2"
    res = json.loads((out / "results.json").read_text())
    assert res["stderr"] == 0.0 and res["mean"] == res["accuracies"][0]
    assert res["config"]["training"]["rounds"] == 1
    assert res["config"]["dataset"]["kind"] == "synthetic"
    rows = list(csv.DictReader((out / "rounds.csv").open()))
    assert {r["role"] for r in rows} == {"source", "target"}
    assert (out / "fusion_weights.csv").exists()


def test_two_seeds_report_mean_and_stderr(env):
    tmp, cfg = env
    _run("prepare-data", "--config", cfg)
    assert _run("run", "--config", cfg, "--seeds", "0,1", "--method", "fedavg") == 0
    assert _run("run", "--config", cfg, "--seeds", "0,1", "--method", "deepall") == 0
    fed = json.loads((tmp / "out" / "fedavg-S2" / "results.json").read_text())
    deep = json.loads((tmp / "out" / "deepall-S2" / "results.json").read_text())
    assert len(fed["accuracies"]) == 2 and "stderr" in fed and "mean" in fed
    assert fed["data_hash"] == deep["data_hash"]


def test_run_with_checkpoints(env):
    tmp, cfg = env
    _run("prepare-data", "--config", cfg)
    assert _run("run", "--config", cfg, "--checkpoints") == 0
    assert (tmp / "out" / "csac-S2" / "checkpoints-seed0" / "round_002" / "manifest.json").exists()


def test_ablate(env, capsys):
    tmp, cfg = env
    _run("prepare-data", "--config", cfg)
    assert _run("ablate", "--config", cfg) == 0
    rows = list(csv.DictReader((tmp / "out" / "ablation-S2.csv").open()))
    assert len(rows) == 1 and rows[0]["setting"] == "csac"
    assert _run("ablate", "--config", cfg, "--axis", "metric=l1,l2,cosine") == 0
    rows = list(csv.DictReader((tmp / "out" / "ablation-S2.csv").open()))
    assert [r["setting"] for r in rows] == ["metric=l1", "metric=l2", "metric=cosine"]
    capsys.readouterr()
    assert _run("ablate", "--config", cfg, "--set", "warp=1") == 2
    err = capsys.readouterr().err
    assert "error[E_CONFIG]" in err and "fusion" in err and "discrepancy" in err


def test_analyze(env, capsys):
    tmp, cfg = env
    _run("prepare-data", "--config", cfg)
    assert _run("analyze", "--config", cfg, "--models-per-domain", "2") == 0
    rows = list(csv.DictReader((tmp / "out" / "distance_study.csv").open()))
    assert [r["layer"] for r in rows] == ["conv1", "conv2", "fc1", "fc2"]
    pairs = list(csv.DictReader((tmp / "out" / "distance_pairs.csv").open()))
    for r in rows:
        intra = [float(p["distance"]) for p in pairs if p["layer"] == r["layer"] and p["kind"] == "intra"]
        assert float(r["mean_intra"]) == pytest.approx(sum(intra) / len(intra), rel=1e-12)
    meta = json.loads((tmp / "out" / "distance_study.json").read_text())
    assert set(meta["gap_ratio"]) == {"conv1", "conv2", "fc1", "fc2"}
    capsys.readouterr()
    assert _run("analyze", "--config", cfg, "--models-per-domain", "1") == 2
    assert "error[E_CONFIG]" in capsys.readouterr().err


def test_bad_config_file(tmp_path, capsys):
    p = tmp_path / "bad.json"
    p.write_text("{not json")
    assert _run("run", "--config", p) == 2
    assert "error[E_CONFIG]" in capsys.readouterr().err
    p.write_text(json.dumps({"colour": "red"}))
    assert _run("run", "--config", p) == 2


def test_module_entry_point(env):
    tmp, cfg = env
    proc = subprocess.run([sys.executable, "-m", "csac", "run", "--config", str(cfg), "--method", "nope"],
                          capture_output=True, text=True)
    assert proc.returncode != 0
