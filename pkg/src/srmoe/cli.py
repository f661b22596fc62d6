"""Command line entry point: ``srmoe {gen-data,train,oneshot,report,run}``.

Exit codes: 0 success, 1 usage/config error, 2 data error, 3 numeric failure.
"""
from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import checkpoint
from .adaptation import interference_experiment, write_report
from .config import ConfigError, RunConfig, derive_seed
from .data import TensorFileError, generate_synthetic, load_tensor_file, save_tensor_file, split
from .moe import SrMoeModel
from .training import NumericError, train

log = logging.getLogger("srmoe")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3
SPLIT_NAMES = ("train", "val", "test", "novel")
TRAIN_LOG = "train_log.csv"
CHECKPOINT = "checkpoint.srmc"
MODE_ORDER = {"baseline": 0, "clustering": 1, "spectral": 2}


class DataError(RuntimeError):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _data_dir(cfg: RunConfig) -> Path:
    return Path(cfg.out) / "data"


def _load_splits(cfg: RunConfig, names=SPLIT_NAMES) -> dict:
    root = _data_dir(cfg)
    out = {}
    for name in names:
        path = root / f"{name}.srmt"
        if not path.exists():
            raise DataError(f"missing data file {path} (run gen-data first)")
        try:
            out[name] = load_tensor_file(path)
        except TensorFileError as exc:
            raise DataError(str(exc)) from exc
    return out


def cmd_gen_data(cfg: RunConfig) -> list[Path]:
    d = cfg.data
    ds = generate_synthetic(d.classes, d.per_class, derive_seed(cfg.seed, "data"), d.noise,
                            d.nonlinear, (d.channels, d.height, d.width))
    try:
        parts = split(ds, d.ratios, d.novel_per_class, derive_seed(cfg.seed, "split"))
    except ValueError as exc:
        raise DataError(str(exc)) from exc
    root = _data_dir(cfg)
    root.mkdir(parents=True, exist_ok=True)
    cfg.dump(Path(cfg.out) / "config.json")
    paths = []
    for name in SPLIT_NAMES:
        path = root / f"{name}.srmt"
        save_tensor_file(parts[name], path)
        paths.append(path)
    return paths


def write_train_log(history: list[dict], path) -> None:
    cols = list(history[0].keys())
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(cols)
        for row in history:
            w.writerow([row[c] if c == "epoch" else repr(float(row[c])) for c in cols])


def cmd_train(cfg: RunConfig) -> Path:
    splits = _load_splits(cfg, ("train", "val"))
    model = SrMoeModel.init(cfg.model)
    result = train(model, splits["train"], splits["val"], cfg.train)
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    cfg.dump(out / "config.json")
    write_train_log(result.history, out / TRAIN_LOG)
    ckpt = out / CHECKPOINT
    checkpoint.save(model, ckpt)
    log.info("best epoch %d, val acc %.4f", result.best_epoch, result.best_val_acc)
    return ckpt


def cmd_oneshot(cfg: RunConfig, ckpt_path=None) -> Path:
    ckpt_path = Path(ckpt_path) if ckpt_path else Path(cfg.out) / CHECKPOINT
    if not ckpt_path.exists():
        raise DataError(f"missing checkpoint {ckpt_path} (run train first)")
    try:
        model = checkpoint.load(ckpt_path)
    except checkpoint.CheckpointError as exc:
        raise DataError(f"{ckpt_path}: {exc}") from exc
    splits = _load_splits(cfg, ("train", "test", "novel"))
    report = interference_experiment(model, splits["novel"], splits["test"], splits["train"], cfg.oneshot)
    if not np.isfinite(report.mean_delta) or not np.all(np.isfinite(report.vitality)):
        raise NumericError("non-finite value in one-shot report")
    out = Path(cfg.out) / "oneshot"
    write_report(report, out)
    cfg.dump(Path(cfg.out) / "config.json")
    return out / "report.json"


def _load_report(run_dir: Path) -> dict:
    path = run_dir / "oneshot" / "report.json"
    if not path.exists():
        raise DataError(f"no one-shot report in {run_dir}")
    return json.loads(path.read_text())


def comparison_table(reports: list[dict]) -> tuple[list[str], list[list[str]]]:
    reports = sorted(reports, key=lambda r: MODE_ORDER.get(r["mode"], 99))
    header = ["metric"] + [r["mode"].capitalize() for r in reports]
    n_cls = max(len(r["class_deltas"]) for r in reports)
    rows = [["Avg. Initial Acc"] + [f"{100 * r['pre_accuracy']:.2f}%" for r in reports]]
    for c in range(n_cls):
        rows.append([f"Delta class {c}"] + [
            f"{100 * r['class_deltas'][c]:+.2f}%" if c < len(r["class_deltas"]) else "" for r in reports])
    rows.append(["Mean Delta"] + [f"{100 * r['mean_delta']:+.2f}%" for r in reports])
    rows.append(["Path Diversity"] + [str(r["path_diversity"]) for r in reports])
    return header, rows


def cmd_report(run_dirs: list[Path], out_dir: Path | None = None) -> str:
    for d in run_dirs:
        if not d.is_dir():
            raise DataError(f"run directory {d} does not exist")
    header, rows = comparison_table([_load_report(d) for d in run_dirs])
    widths = [max(len(x) for x in col) for col in zip(header, *rows)]
    lines = ["  ".join(x.ljust(w) for x, w in zip(r, widths)).rstrip() for r in [header] + rows]
    text = "\n".join(lines) + "\n"
    if out_dir is not None:
        out_dir.mkdir(parents=True, exist_ok=True)
        with open(out_dir / "comparison.csv", "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(header)
            w.writerows(rows)
        (out_dir / "comparison.txt").write_text(text)
    return text


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="srmoe", description="Spectrally regularized MoE experiments")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def common(sp):
        sp.add_argument("--config", type=Path, help="JSON run config")
        sp.add_argument("--seed", type=int, help="root seed (overrides the config)")
        sp.add_argument("--out", type=Path, help="run directory (overrides the config)")
        sp.add_argument("--mode", choices=sorted(MODE_ORDER), help="routing mode override")
        sp.add_argument("-v", "--verbose", action="store_true")

    common(sub.add_parser("gen-data", help="write train/val/test/novel tensor files"))
    common(sub.add_parser("train", help="train a model and save the best-val checkpoint"))
    sp = sub.add_parser("oneshot", help="run the one-shot interference experiment")
    common(sp)
    sp.add_argument("--checkpoint", type=Path)
    common(sub.add_parser("run", help="gen-data, train and oneshot in sequence"))
    rp = sub.add_parser("report", help="compare one-shot reports of several runs")
    rp.add_argument("runs", nargs="+", type=Path)
    rp.add_argument("--out", type=Path, help="directory for comparison.csv / comparison.txt")
    rp.add_argument("-v", "--verbose", action="store_true")
    return p


def _resolve_config(args) -> RunConfig:
    cfg = RunConfig.load(args.config) if args.config else RunConfig()
    return cfg.with_overrides(seed=args.seed, out=args.out, mode=args.mode)


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(levelname)s %(name)s: %(message)s")
    try:
        if args.command == "report":
            print(cmd_report(args.runs, args.out), end="")
            return EXIT_OK
        cfg = _resolve_config(args)
        if args.command in ("gen-data", "run"):
            cmd_gen_data(cfg)
        if args.command in ("train", "run"):
            cmd_train(cfg)
        if args.command == "oneshot":
            print(cmd_oneshot(cfg, args.checkpoint))
        elif args.command == "run":
            print(cmd_oneshot(cfg))
    except (DataError, FileNotFoundError, TensorFileError) as exc:
        print(f"srmoe: data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except (ConfigError, ValueError) as exc:
        print(f"srmoe: config error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except NumericError as exc:
        print(f"srmoe: numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
