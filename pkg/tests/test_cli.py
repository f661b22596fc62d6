import csv
import hashlib
import json
import subprocess
import sys

import jsonschema
import pytest

from srmoe.adaptation import report_schema
from srmoe.cli import main

SMALL = {
    "data": {"classes": 3, "per_class": 30, "noise": 0.3, "nonlinear": False, "height": 8, "width": 8,
             "novel_per_class": 2},
    "model": {"n_layers": 2, "n_experts": 2, "hidden": 8,
              "stem": {"convs": [{"out_channels": 3}], "pool_out": [2, 2], "embed_dim": 6}},
    "train": {"epochs": 2, "batch_size": 16, "lr": 0.01},
    "oneshot": {"lr": 0.1, "anchor_size": 4},
}


@pytest.fixture
def cfg_path(tmp_path):
    path = tmp_path / "cfg.json"
    path.write_text(json.dumps(SMALL))
    return path


def _digest(root):
    return {p.relative_to(root).as_posix(): hashlib.sha256(p.read_bytes()).hexdigest()
            for p in sorted(root.rglob("*")) if p.is_file()}


def _run(cfg_path, out, mode="spectral", seed=0, cmd="run"):
    return main([cmd, "--config", str(cfg_path), "--out", str(out), "--mode", mode, "--seed", str(seed)])


def test_gen_data_writes_four_files(tmp_path, cfg_path):
    assert main(["gen-data", "--config", str(cfg_path), "--out", str(tmp_path / "r")]) == 0
    assert sorted(p.name for p in (tmp_path / "r" / "data").iterdir()) == \
        ["novel.srmt", "test.srmt", "train.srmt", "val.srmt"]
    resolved = json.loads((tmp_path / "r" / "config.json").read_text())
    assert resolved["seed"] == 0 and resolved["data"]["classes"] == 3


def test_gen_data_deterministic(tmp_path, cfg_path):
    for name in ("a", "b"):
        assert main(["gen-data", "--config", str(cfg_path), "--out", str(tmp_path / name), "--seed", "4"]) == 0
    a, b = _digest(tmp_path / "a" / "data"), _digest(tmp_path / "b" / "data")
    assert a == b


def test_bad_ratio_config_exit_1(tmp_path, capsys):
    path = tmp_path / "bad.json"
    path.write_text(json.dumps({"data": {"ratios": [0.9, 0.9, 0.1]}}))
    assert main(["gen-data", "--config", str(path), "--out", str(tmp_path / "x")]) == 1
    assert "ratios" in capsys.readouterr().err


def test_usage_error_exit_1():
    with pytest.raises(SystemExit) as exc:
        main(["train", "--mode", "weird"])
    assert exc.value.code == 1


def test_train_without_data_exit_2(tmp_path, cfg_path, capsys):
    assert _run(cfg_path, tmp_path / "empty", cmd="train") == 2
    assert "gen-data" in capsys.readouterr().err


def test_oneshot_without_checkpoint_exit_2(tmp_path, cfg_path):
    assert _run(cfg_path, tmp_path / "empty", cmd="oneshot") == 2


def test_corrupt_data_exit_2(tmp_path, cfg_path):
    out = tmp_path / "r"
    assert _run(cfg_path, out, cmd="gen-data") == 0
    (out / "data" / "train.srmt").write_bytes(b"SRMT\0")
    assert _run(cfg_path, out, cmd="train") == 2


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_nan_exit_3(tmp_path):
    raw = json.loads(json.dumps(SMALL))
    raw["train"]["lr"] = 1e200
    path = tmp_path / "nan.json"
    path.write_text(json.dumps(raw))
    assert _run(path, tmp_path / "r") == 3


def test_zero_epochs_checkpoint_is_init(tmp_path):
    from srmoe import checkpoint
    from srmoe.config import RunConfig
    from srmoe.moe import SrMoeModel
    raw = json.loads(json.dumps(SMALL))
    raw["train"]["epochs"] = 0
    path = tmp_path / "z.json"
    path.write_text(json.dumps(raw))
    out = tmp_path / "r"
    assert _run(path, out, cmd="gen-data") == 0
    assert _run(path, out, cmd="train") == 0
    cfg = RunConfig.load(path).with_overrides(out=out, mode="spectral", seed=0)
    assert (out / "checkpoint.srmc").read_bytes() == checkpoint.to_bytes(SrMoeModel.init(cfg.model))


def _log(out):
    with open(out / "train_log.csv") as fh:
        return list(csv.DictReader(fh))


def test_train_log_mode_contract(tmp_path, cfg_path):
    for mode in ("baseline", "spectral"):
        out = tmp_path / mode
        assert _run(cfg_path, out, mode=mode, cmd="gen-data") == 0
        assert _run(cfg_path, out, mode=mode, cmd="train") == 0
        rows = _log(out)
        assert len(rows) == SMALL["train"]["epochs"] + 1
        assert {"sigma_max_0", "stable_rank_1", "val_acc"} <= set(rows[0])
        vals = [float(r[c]) for r in rows for c in ("spec", "rank")]
        assert all(v > 0 for v in vals) if mode == "spectral" else all(v == 0.0 for v in vals)


def test_default_training_lowers_fixed_batch_loss(tmp_path):
    # the stock data and training settings, shortened model
    raw = {"data": {"per_class": 100}, "model": {"n_layers": 2, "n_experts": 2}, "train": {"epochs": 3}}
    path = tmp_path / "d.json"
    path.write_text(json.dumps(raw))
    out = tmp_path / "r"
    assert _run(path, out, cmd="gen-data") == 0
    assert _run(path, out, cmd="train") == 0
    rows = _log(out)
    assert float(rows[-1]["fixed_batch_loss"]) <= float(rows[0]["fixed_batch_loss"])


def test_run_outputs_validate_and_reproduce(tmp_path, cfg_path, capsys):
    assert _run(cfg_path, tmp_path / "a") == 0
    assert _run(cfg_path, tmp_path / "b") == 0
    a, b = _digest(tmp_path / "a"), _digest(tmp_path / "b")
    assert set(a) >= {"checkpoint.srmc", "train_log.csv", "config.json", "oneshot/report.json",
                      "oneshot/deltas.csv", "oneshot/utilization.csv", "oneshot/vitality.csv"}
    # the run directory itself is recorded in config.json
    a.pop("config.json"), b.pop("config.json")
    assert a == b
    doc = json.loads((tmp_path / "a" / "oneshot" / "report.json").read_text())
    jsonschema.validate(doc, report_schema())


def test_commands_do_not_touch_inputs(tmp_path, cfg_path):
    out = tmp_path / "r"
    assert _run(cfg_path, out, cmd="gen-data") == 0
    before = _digest(out / "data")
    cfg_bytes = cfg_path.read_bytes()
    assert _run(cfg_path, out, cmd="train") == 0
    ckpt = (out / "checkpoint.srmc").read_bytes()
    assert _run(cfg_path, out, cmd="oneshot") == 0
    assert _digest(out / "data") == before
    assert (out / "checkpoint.srmc").read_bytes() == ckpt
    assert cfg_path.read_bytes() == cfg_bytes


def test_oneshot_zero_lr_zero_delta(tmp_path):
    raw = json.loads(json.dumps(SMALL))
    raw["oneshot"]["lr"] = 0.0
    path = tmp_path / "z.json"
    path.write_text(json.dumps(raw))
    out = tmp_path / "r"
    assert _run(path, out) == 0
    doc = json.loads((out / "oneshot" / "report.json").read_text())
    assert doc["mean_delta"] == 0.0
    jsonschema.validate(doc, report_schema())


def test_oneshot_explicit_checkpoint(tmp_path, cfg_path):
    out = tmp_path / "r"
    assert _run(cfg_path, out) == 0
    first = (out / "oneshot" / "report.json").read_bytes()
    moved = tmp_path / "elsewhere.srmc"
    moved.write_bytes((out / "checkpoint.srmc").read_bytes())
    assert main(["oneshot", "--config", str(cfg_path), "--out", str(out), "--mode", "spectral",
                 "--checkpoint", str(moved)]) == 0
    assert (out / "oneshot" / "report.json").read_bytes() == first


def test_report_table(tmp_path, cfg_path, capsys):
    runs = []
    for mode in ("spectral", "baseline", "clustering"):
        out = tmp_path / mode
        assert _run(cfg_path, out, mode=mode) == 0
        runs.append(str(out))
    capsys.readouterr()
    assert main(["report", runs[0], "--out", str(tmp_path / "cmp")]) == 0
    single = list(csv.reader(open(tmp_path / "cmp" / "comparison.csv")))
    assert single[0] == ["metric", "Spectral"]
    capsys.readouterr()
    assert main(["report", *runs, "--out", str(tmp_path / "cmp")]) == 0
    text = capsys.readouterr().out
    rows = list(csv.reader(open(tmp_path / "cmp" / "comparison.csv")))
    assert rows[0] == ["metric", "Baseline", "Clustering", "Spectral"]
    assert [r[0] for r in rows[1:]] == ["Avg. Initial Acc", "Delta class 0", "Delta class 1", "Delta class 2",
                                         "Mean Delta", "Path Diversity"]
    assert text == (tmp_path / "cmp" / "comparison.txt").read_text()


def test_report_missing_run_exit_2(tmp_path):
    assert main(["report", str(tmp_path / "nope")]) == 2


def test_module_entry_point(tmp_path, cfg_path):
    proc = subprocess.run([sys.executable, "-m", "srmoe", "gen-data", "--config", str(cfg_path),
                           "--out", str(tmp_path / "m")], capture_output=True, text=True)
    assert proc.returncode == 0, proc.stderr
    assert (tmp_path / "m" / "data" / "novel.srmt").exists()
