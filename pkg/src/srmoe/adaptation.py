"""One-shot surgical adaptation and the interference measurements around it.

A surgical update trains only the experts on the novel sample's winning
path.  The stem is always frozen here, so stem embeddings are computed once
and reused for every trial; this is exactly equivalent to running the full
model.
"""
from __future__ import annotations

import csv
import json
from importlib import resources
import warnings
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .checkpoint import CheckpointError, restore, snapshot
from .data import Dataset
from .moe import SrMoeModel, regularized_loss
from .nn import Param, Tape, Var, sgd_step, zero_grads

REPORT_SCHEMA_VERSION = 1


def report_schema() -> dict:
    """JSON Schema for ``report.json`` (shipped as package data)."""
    return json.loads(resources.files("srmoe").joinpath("schemas/report.schema.json").read_text())


@dataclass(frozen=True)
class OneShotConfig:
    lr: float = 1e-2
    steps: int = 1
    anchor_size: int = 16
    hard_forward: bool = False  # one-hot mixture during the update (ablation)
    update_head: bool = False
    max_novel_per_class: int | None = None
    seed: int = 0

    def __post_init__(self):
        if self.steps < 1:
            raise ValueError("steps must be >= 1")
        if self.lr < 0 or self.anchor_size < 0:
            raise ValueError("lr and anchor_size must be non-negative")


@dataclass
class SurgicalPlan:
    path: list[int]
    lr: float = 1e-2
    steps: int = 1
    anchor_size: int = 16
    hard_forward: bool = False
    update_head: bool = False

    def updated_params(self, model: SrMoeModel) -> list[Param]:
        out = []
        for layer, k in zip(model.layers, self.path):
            out.extend(layer.experts[k].params)
        if self.update_head:
            out.extend([model.head_w, model.head_b])
        return out

    def frozen_params(self, model: SrMoeModel) -> list[Param]:
        keep = {id(p) for p in self.updated_params(model)}
        return [p for p in model.params() if id(p) not in keep]

    @classmethod
    def for_sample(cls, model: SrMoeModel, x_new, cfg: OneShotConfig) -> "SurgicalPlan":
        return cls(winning_path(model, x_new), cfg.lr, cfg.steps, cfg.anchor_size,
                   cfg.hard_forward, cfg.update_head)


@dataclass
class InterferenceReport:
    mode: str
    pre_accuracy: float
    class_deltas: list[float]
    class_counts: list[int]
    mean_delta: float
    path_diversity: int
    utilization: np.ndarray  # (classes, layers, K) counts on the test set
    vitality: np.ndarray  # (layers, K) mean expert gradient norm over trials
    trial_deltas: list[float] = field(default_factory=list)
    trial_labels: list[int] = field(default_factory=list)
    trial_paths: list[list[int]] = field(default_factory=list)
    config: dict = field(default_factory=dict)

    def to_json(self) -> dict:
        return {
            "schema_version": REPORT_SCHEMA_VERSION,
            "mode": self.mode,
            "pre_accuracy": self.pre_accuracy,
            "class_deltas": list(self.class_deltas),
            "class_counts": list(self.class_counts),
            "mean_delta": self.mean_delta,
            "path_diversity": self.path_diversity,
            "utilization": self.utilization.tolist(),
            "vitality": self.vitality.tolist(),
            "trials": [
                {"label": int(y), "path": [int(k) for k in p], "delta": float(d)}
                for y, p, d in zip(self.trial_labels, self.trial_paths, self.trial_deltas)
            ],
            "config": self.config,
        }


def _embed(model: SrMoeModel, x) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if x.ndim == 3:
        x = x[None]
    return model.embed(Tape(record=False), x).value


def _records_from_embedding(model: SrMoeModel, z0: np.ndarray):
    logits, records, _ = model.forward_from_embedding(Tape(record=False), Var(z0))
    return logits.value, records


def winning_path(model: SrMoeModel, x_new) -> list[int]:
    """Argmax expert per layer for a single sample (lowest index on ties)."""
    z0 = _embed(model, x_new)
    if z0.shape[0] != 1:
        raise ValueError("winning_path takes exactly one sample")
    _, records = _records_from_embedding(model, z0)
    return [int(r.winners[0]) for r in records]


def _combined_loss(model: SrMoeModel, tape: Tape, z0: np.ndarray, labels: np.ndarray):
    logits, _, weight_vars = model.forward_from_embedding(tape, Var(z0))
    return regularized_loss(model, tape, logits, labels, weight_vars)


def _update_embedded(model: SrMoeModel, z0: np.ndarray, labels: np.ndarray, plan: SurgicalPlan) -> None:
    params = model.params()
    saved_flags = [p.trainable for p in params]
    saved_hard = model.hard_routing
    try:
        model.set_trainable(False)
        updated = plan.updated_params(model)
        for p in updated:
            p.trainable = True
        model.hard_routing = plan.hard_forward
        for _ in range(plan.steps):
            tape = Tape()
            zero_grads(params)
            loss, _ = _combined_loss(model, tape, z0, labels)
            tape.backward(loss)
            sgd_step(updated, plan.lr)
    finally:
        zero_grads(params)
        for p, flag in zip(params, saved_flags):
            p.trainable = flag
        model.hard_routing = saved_hard


def _combine(x_new, y_new, anchor_x, anchor_y):
    x_new = np.asarray(x_new, dtype=np.float64)
    if x_new.ndim == 3:
        x_new = x_new[None]
    xs = x_new if anchor_x is None or len(anchor_x) == 0 else np.concatenate([anchor_x, x_new])
    ys = np.asarray([y_new], dtype=np.int64)
    if anchor_y is not None and len(anchor_y):
        ys = np.concatenate([np.asarray(anchor_y, dtype=np.int64), ys])
    return xs, ys


def surgical_update(model: SrMoeModel, x_new, y_new: int, anchor_x, anchor_y,
                    plan: SurgicalPlan) -> SrMoeModel:
    """SGD on the anchor batch plus the novel sample, restricted to the plan's experts.

    The model is modified in place and returned.  Every param outside
    ``plan.updated_params`` is left bitwise unchanged.
    """
    if plan.steps < 1:
        raise ValueError("plan.steps must be >= 1")
    if anchor_x is None or len(anchor_x) == 0:
        warnings.warn("surgical update without anchor batch: single-sample collapse risk",
                      stacklevel=2)
    xs, ys = _combine(x_new, y_new, anchor_x, anchor_y)
    _update_embedded(model, _embed(model, xs), ys, plan)
    return model


def _expert_grad_norms(model: SrMoeModel) -> np.ndarray:
    out = np.zeros((len(model.layers), model.cfg.n_experts))
    for li, layer in enumerate(model.layers):
        for ei, e in enumerate(layer.experts):
            out[li, ei] = np.sqrt(sum(float(np.sum(p.grad * p.grad)) for p in e.params))
    return out


def _vitality_embedded(model: SrMoeModel, z0: np.ndarray, labels: np.ndarray) -> np.ndarray:
    params = model.params()
    zero_grads(params)
    tape = Tape()
    loss, _ = _combined_loss(model, tape, z0, labels)
    tape.backward(loss)
    norms = _expert_grad_norms(model)
    zero_grads(params)
    return norms


def gradient_vitality(model: SrMoeModel, x_new, y_new: int, anchor_x, anchor_y) -> np.ndarray:
    """``||grad E_i||_2`` per (layer, expert) from one unrestricted backward pass."""
    xs, ys = _combine(x_new, y_new, anchor_x, anchor_y)
    return _vitality_embedded(model, _embed(model, xs), ys)


def utilization_from_records(records, labels: np.ndarray, num_classes: int) -> np.ndarray:
    k = records[0].weights.shape[1] if records else 1
    counts = np.zeros((num_classes, len(records), k), dtype=np.int64)
    for li, r in enumerate(records):
        np.add.at(counts, (labels, li, r.winners), 1)
    return counts


def path_utilization(model: SrMoeModel, ds: Dataset) -> np.ndarray:
    """Argmax-expert counts as a (classes, layers, K) integer array."""
    if len(ds) == 0:
        return np.zeros((ds.num_classes, len(model.layers), model.cfg.n_experts), dtype=np.int64)
    _, records = _records_from_embedding(model, _embed(model, ds.images))
    return utilization_from_records(records, ds.labels, ds.num_classes)


def class_majority_paths(utilization: np.ndarray) -> dict[int, tuple[int, ...]]:
    paths = {}
    for c in range(utilization.shape[0]):
        if utilization[c].sum() == 0:
            continue
        paths[c] = tuple(int(k) for k in np.argmax(utilization[c], axis=1))
    return paths


def path_diversity(utilization: np.ndarray) -> int:
    """Number of distinct per-class majority expert chains."""
    return len(set(class_majority_paths(utilization).values()))


def _accuracy_embedded(model: SrMoeModel, z0: np.ndarray, labels: np.ndarray) -> float:
    logits, _ = _records_from_embedding(model, z0)
    return float(np.mean(np.argmax(logits, axis=1) == labels))


def _trial_rng(seed: int, trial: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([seed, trial]))


def interference_experiment(model: SrMoeModel, novel: Dataset, test: Dataset, anchors: Dataset,
                            cfg: OneShotConfig) -> InterferenceReport:
    """Restore, update on one novel sample, re-test; repeated for every novel sample.

    The model is returned to its starting weights afterwards.
    """
    if len(test) == 0:
        raise ValueError("empty test set")
    start = snapshot(model)
    z_test = _embed(model, test.images)
    z_anchor = _embed(model, anchors.images) if len(anchors) else np.zeros((0, model.cfg.d))
    pre = _accuracy_embedded(model, z_test, test.labels)
    _, test_records = _records_from_embedding(model, z_test)
    util = utilization_from_records(test_records, test.labels, test.num_classes)

    trials = []
    for c in range(novel.num_classes):
        idx = np.flatnonzero(novel.labels == c)
        if cfg.max_novel_per_class is not None:
            idx = idx[:cfg.max_novel_per_class]
        trials.extend(idx.tolist())
    trials.sort()

    z_novel = _embed(model, novel.images) if len(novel) else np.zeros((0, model.cfg.d))
    vit_sum = np.zeros((len(model.layers), model.cfg.n_experts))
    deltas, labels, paths = [], [], []
    for t, i in enumerate(trials):
        try:
            restore(model, start)
        except CheckpointError as exc:
            raise RuntimeError(f"checkpoint restore failed before trial {t}") from exc
        rng = _trial_rng(cfg.seed, t)
        n_anchor = min(cfg.anchor_size, len(anchors))
        a_idx = np.sort(rng.choice(len(anchors), size=n_anchor, replace=False)) if n_anchor else np.zeros(0, int)
        z_comb = np.concatenate([z_anchor[a_idx], z_novel[i:i + 1]])
        y_comb = np.concatenate([anchors.labels[a_idx], novel.labels[i:i + 1]])
        _, rec = _records_from_embedding(model, z_novel[i:i + 1])
        path = [int(r.winners[0]) for r in rec]
        plan = SurgicalPlan(path, cfg.lr, cfg.steps, cfg.anchor_size, cfg.hard_forward, cfg.update_head)
        vit_sum += _vitality_embedded(model, z_comb, y_comb)
        _update_embedded(model, z_comb, y_comb, plan)
        post = _accuracy_embedded(model, z_test, test.labels)
        deltas.append(post - pre)
        labels.append(int(novel.labels[i]))
        paths.append(path)
    restore(model, start)

    deltas_a = np.asarray(deltas)
    labels_a = np.asarray(labels, dtype=np.int64)
    class_deltas, class_counts = [], []
    for c in range(novel.num_classes):
        sel = deltas_a[labels_a == c]
        class_counts.append(int(sel.size))
        class_deltas.append(float(sel.mean()) if sel.size else 0.0)
    present = [d for d, n in zip(class_deltas, class_counts) if n > 0]
    mean_delta = float(np.mean(present)) if present else 0.0
    return InterferenceReport(
        mode=model.cfg.mode.value,
        pre_accuracy=pre,
        class_deltas=class_deltas,
        class_counts=class_counts,
        mean_delta=mean_delta,
        path_diversity=path_diversity(util),
        utilization=util,
        vitality=vit_sum / max(len(trials), 1),
        trial_deltas=[float(d) for d in deltas],
        trial_labels=labels,
        trial_paths=paths,
        config=asdict(cfg),
    )


# ---------------------------------------------------------------------------
# CSV export
# ---------------------------------------------------------------------------

DELTA_COLUMNS = ["class", "n_novel", "mean_delta"]
UTILIZATION_COLUMNS = ["class", "layer", "expert", "count", "fraction"]
VITALITY_COLUMNS = ["layer", "expert", "grad_norm"]


def write_delta_csv(report: InterferenceReport, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(DELTA_COLUMNS)
        for c, (d, n) in enumerate(zip(report.class_deltas, report.class_counts)):
            w.writerow([c, n, repr(d)])


def write_utilization_csv(util: np.ndarray, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(UTILIZATION_COLUMNS)
        for c in range(util.shape[0]):
            total = util[c].sum(axis=1)
            for li in range(util.shape[1]):
                for k in range(util.shape[2]):
                    frac = util[c, li, k] / total[li] if total[li] else 0.0
                    w.writerow([c, li, k, int(util[c, li, k]), repr(float(frac))])


def write_vitality_csv(vitality: np.ndarray, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(VITALITY_COLUMNS)
        for li in range(vitality.shape[0]):
            for k in range(vitality.shape[1]):
                w.writerow([li, k, repr(float(vitality[li, k]))])


def write_report(report: InterferenceReport, out_dir) -> None:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "report.json").write_text(json.dumps(report.to_json(), indent=2, sort_keys=True) + "\n")
    write_delta_csv(report, out / "deltas.csv")
    write_utilization_csv(report.utilization, out / "utilization.csv")
    write_vitality_csv(report.vitality, out / "vitality.csv")
