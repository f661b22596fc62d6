"""Minibatch SGD on the regularized objective, with per-epoch diagnostics."""
from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from . import linalg
from .checkpoint import restore, snapshot
from .data import Dataset
from .moe import SrMoeModel, predict, total_loss
from .nn import Tape, sgd_step, zero_grads

log = logging.getLogger(__name__)


class NumericError(RuntimeError):
    """A loss or parameter became NaN/Inf."""


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 30
    lr: float = 0.02
    batch_size: int = 32
    fixed_batch: int = 64  # samples used for the epoch-over-epoch loss probe
    seed: int = 0

    def __post_init__(self):
        if self.epochs < 0 or self.batch_size < 1 or self.lr < 0:
            raise ValueError("epochs >= 0, batch_size >= 1 and lr >= 0 are required")


@dataclass
class TrainResult:
    history: list[dict] = field(default_factory=list)
    best_epoch: int = 0
    best_val_acc: float = float("nan")


def accuracy(model: SrMoeModel, ds: Dataset) -> float:
    if len(ds) == 0:
        return float("nan")
    pred, _ = predict(model, ds.images)
    return float(np.mean(pred == ds.labels))


def layer_spectra(model: SrMoeModel) -> list[tuple[float, float]]:
    """(sigma_max, stable rank) of every layer's local-processor weight."""
    cfg = model.cfg
    out = []
    for layer in model.layers:
        w = layer.proc_w.value
        s = linalg.spectral_norm(w, cfg.power_iters, cfg.power_tol)
        out.append((s, float(np.sum(w * w)) / s**2 if s > 0 else float("nan")))
    return out


def _epoch_row(model, epoch, sums, n_batches, fixed, val) -> dict:
    row = {"epoch": epoch}
    for key in ("task", "spec", "rank", "div", "total"):
        row[key] = sums.get(key, 0.0) / n_batches if n_batches else 0.0
    _, fixed_bd = total_loss(model, fixed.images, fixed.labels)
    row["fixed_batch_loss"] = fixed_bd["total"]
    row["val_acc"] = accuracy(model, val)
    for li, (s, r) in enumerate(layer_spectra(model)):
        row[f"sigma_max_{li}"] = s
        row[f"stable_rank_{li}"] = r
    return row


def train(model: SrMoeModel, train_ds: Dataset, val_ds: Dataset, cfg: TrainConfig) -> TrainResult:
    """Train in place; on return ``model`` holds the best-validation weights.

    Row 0 of the history describes the initialisation (loss columns are the
    fixed-batch breakdown there, since no batch was trained on).
    """
    rng = np.random.default_rng(cfg.seed)
    params = model.params()
    fixed_idx = np.sort(rng.choice(len(train_ds), size=min(cfg.fixed_batch, len(train_ds)), replace=False))
    fixed = train_ds.subset(fixed_idx)

    result = TrainResult()
    _, init_bd = total_loss(model, fixed.images, fixed.labels)
    row0 = _epoch_row(model, 0, init_bd, 1, fixed, val_ds)
    result.history.append(row0)
    best = snapshot(model)
    result.best_val_acc = row0["val_acc"]

    n = len(train_ds)
    for epoch in range(1, cfg.epochs + 1):
        order = rng.permutation(n)
        sums: dict[str, float] = {}
        n_batches = 0
        for start in range(0, n, cfg.batch_size):
            idx = order[start:start + cfg.batch_size]
            tape = Tape()
            zero_grads(params)
            loss, bd = total_loss(model, train_ds.images[idx], train_ds.labels[idx], tape)
            if not np.isfinite(loss.value):
                raise NumericError(f"non-finite loss at epoch {epoch}")
            tape.backward(loss)
            sgd_step(params, cfg.lr)
            for k, v in bd.items():
                sums[k] = sums.get(k, 0.0) + v
            n_batches += 1
        if not all(np.all(np.isfinite(p.value)) for p in params):
            raise NumericError(f"non-finite parameters after epoch {epoch}")
        row = _epoch_row(model, epoch, sums, n_batches, fixed, val_ds)
        result.history.append(row)
        log.info("epoch %d loss %.4f val_acc %.4f", epoch, row["total"], row["val_acc"])
        # strict '>' keeps the earliest of equally good epochs
        if row["val_acc"] > result.best_val_acc or np.isnan(result.best_val_acc):
            result.best_val_acc = row["val_acc"]
            result.best_epoch = epoch
            best = snapshot(model)
    restore(model, best)
    return result
