"""Run configuration: one JSON document covering data, model, training and one-shot settings.

Documented keys (all optional, defaults in brackets)::

    seed                  root seed [0]; every random stream is derived from it
    out                   output directory ["runs/default"]
    data.classes          [4]        data.per_class      [400]
    data.noise            [1.5]      data.nonlinear      [true]
    data.channels/height/width       [1, 16, 16]
    data.ratios           [[0.7, 0.15, 0.15]]
    data.novel_per_class  [25]
    model.*               ModelConfig fields: mode, n_layers, n_experts, hidden, tau,
                          alpha, beta, sigma_t, rho_t, baseline_penalties,
                          gate_init_std, power_iters, power_tol, stem{...}
    train.*               epochs, lr, batch_size, fixed_batch
    oneshot.*             lr, steps, anchor_size, hard_forward, update_head,
                          max_novel_per_class

``model.seed``, ``train.seed``, ``oneshot.seed`` and the stem's input shape /
``model.num_classes`` are filled in from the root seed and data section.
"""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

import numpy as np

from .adaptation import OneShotConfig
from .moe import ModelConfig
from .nn import StemConfig
from .training import TrainConfig

_STREAMS = {"data": 1, "split": 2, "model": 3, "train": 4, "oneshot": 5}


class ConfigError(ValueError):
    pass


def derive_seed(root: int, stream: str) -> int:
    return int(np.random.SeedSequence([int(root), _STREAMS[stream]]).generate_state(1)[0])


@dataclass(frozen=True)
class DataConfig:
    classes: int = 4
    per_class: int = 400
    noise: float = 1.5
    nonlinear: bool = True
    channels: int = 1
    height: int = 16
    width: int = 16
    ratios: tuple[float, float, float] = (0.7, 0.15, 0.15)
    novel_per_class: int = 25

    def __post_init__(self):
        object.__setattr__(self, "ratios", tuple(float(r) for r in self.ratios))
        if len(self.ratios) != 3 or min(self.ratios) < 0 or abs(sum(self.ratios) - 1.0) > 1e-9:
            raise ConfigError(f"data.ratios must be three non-negative numbers summing to 1, got {list(self.ratios)}")
        if self.classes < 2 or self.per_class < 10:
            raise ConfigError("data.classes >= 2 and data.per_class >= 10 are required")
        if self.noise < 0 or self.novel_per_class < 0:
            raise ConfigError("data.noise and data.novel_per_class must be non-negative")


def _build(cls, raw: dict | None, section: str):
    raw = dict(raw or {})
    names = {f.name for f in fields(cls)}
    unknown = set(raw) - names
    if unknown:
        raise ConfigError(f"unknown keys in '{section}': {sorted(unknown)}")
    try:
        return cls(**raw)
    except ConfigError:
        raise
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"invalid '{section}' section: {exc}") from exc


@dataclass(frozen=True)
class RunConfig:
    seed: int = 0
    out: str = "runs/default"
    data: DataConfig = field(default_factory=DataConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    oneshot: OneShotConfig = field(default_factory=OneShotConfig)

    @classmethod
    def from_dict(cls, raw: dict) -> "RunConfig":
        if not isinstance(raw, dict):
            raise ConfigError("config must be a JSON object")
        unknown = set(raw) - {"seed", "out", "data", "model", "train", "oneshot"}
        if unknown:
            raise ConfigError(f"unknown top-level keys: {sorted(unknown)}")
        seed = raw.get("seed", 0)
        if not isinstance(seed, int) or seed < 0:
            raise ConfigError("seed must be a non-negative integer")
        model_raw = dict(raw.get("model") or {})
        if "stem" in model_raw and isinstance(model_raw["stem"], dict):
            model_raw["stem"] = _build(StemConfig, model_raw["stem"], "model.stem")
        cfg = cls(
            seed=seed,
            out=str(raw.get("out", "runs/default")),
            data=_build(DataConfig, raw.get("data"), "data"),
            model=_build(ModelConfig, model_raw, "model"),
            train=_build(TrainConfig, raw.get("train"), "train"),
            oneshot=_build(OneShotConfig, raw.get("oneshot"), "oneshot"),
        )
        return cfg.resolved()

    @classmethod
    def load(cls, path) -> "RunConfig":
        try:
            raw = json.loads(Path(path).read_text())
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: not valid JSON ({exc})") from exc
        return cls.from_dict(raw)

    def resolved(self) -> "RunConfig":
        """Tie derived fields (seeds, stem input shape, class count) to the root values."""
        d = self.data
        try:
            stem = replace(self.model.stem, in_channels=d.channels, height=d.height, width=d.width)
            model = replace(self.model, stem=stem, num_classes=d.classes,
                            seed=derive_seed(self.seed, "model"))
        except ValueError as exc:
            raise ConfigError(f"model does not fit the data shape: {exc}") from exc
        return replace(
            self,
            model=model,
            train=replace(self.train, seed=derive_seed(self.seed, "train")),
            oneshot=replace(self.oneshot, seed=derive_seed(self.seed, "oneshot")),
        )

    def with_overrides(self, seed=None, out=None, mode=None) -> "RunConfig":
        cfg = self
        if seed is not None:
            cfg = replace(cfg, seed=seed)
        if out is not None:
            cfg = replace(cfg, out=str(out))
        if mode is not None:
            try:
                cfg = replace(cfg, model=replace(cfg.model, mode=mode))
            except ValueError as exc:
                raise ConfigError(str(exc)) from exc
        return cfg.resolved()

    def to_dict(self) -> dict:
        return {
            "seed": self.seed,
            "out": self.out,
            "data": {**asdict(self.data), "ratios": list(self.data.ratios)},
            "model": self.model.to_dict(),
            "train": asdict(self.train),
            "oneshot": asdict(self.oneshot),
        }

    def dump(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n")
