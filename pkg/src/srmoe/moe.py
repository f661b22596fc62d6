"""Stacked mixture-of-experts layers with prototype routing and spectral penalties."""
from __future__ import annotations

import enum
from dataclasses import dataclass, field, replace
from typing import NamedTuple, Sequence

import numpy as np

from . import linalg
from .nn import ConvStem, Param, StemConfig, Tape, Var, he_normal


class RoutingMode(str, enum.Enum):
    BASELINE = "baseline"      # dot-product linear gate
    CLUSTERING = "clustering"  # prototype distances, no spectral penalties
    SPECTRAL = "spectral"      # prototype distances + spectral penalties

    @property
    def uses_prototypes(self) -> bool:
        return self is not RoutingMode.BASELINE


@dataclass(frozen=True)
class ModelConfig:
    mode: RoutingMode = RoutingMode.SPECTRAL
    n_layers: int = 4
    n_experts: int = 4
    hidden: int = 64
    num_classes: int = 4
    tau: float = 1.0
    alpha: float = 0.01
    beta: float = 0.01
    sigma_t: float = 1.0
    rho_t: float | None = None  # None -> min(rows, cols) / 2 of the targeted matrix
    # Baseline ablation: put the spectral terms on the gate matrix.
    baseline_penalties: bool = False
    gate_init_std: float | None = None  # None -> 1/sqrt(d)
    power_iters: int = linalg.DEFAULT_MAX_ITERS
    power_tol: float = linalg.DEFAULT_TOL
    seed: int = 0
    stem: StemConfig = field(default_factory=StemConfig)

    def __post_init__(self):
        object.__setattr__(self, "mode", RoutingMode(self.mode))
        if isinstance(self.stem, dict):
            object.__setattr__(self, "stem", StemConfig(**self.stem))
        if self.n_layers < 1:
            raise ValueError("n_layers must be >= 1")
        if self.n_experts < 1:
            raise ValueError("n_experts must be >= 1")
        if self.tau <= 0:
            raise ValueError("tau must be > 0")
        if self.alpha < 0 or self.beta < 0:
            raise ValueError("alpha and beta must be non-negative")
        if self.sigma_t <= 0 or (self.rho_t is not None and self.rho_t <= 0):
            raise ValueError("sigma_t and rho_t must be positive")
        if self.num_classes < 2 or self.hidden < 1:
            raise ValueError("num_classes must be >= 2 and hidden >= 1")

    @property
    def d(self) -> int:
        return self.stem.embed_dim

    @property
    def penalized(self) -> bool:
        return self.mode is RoutingMode.SPECTRAL or (
            self.mode is RoutingMode.BASELINE and self.baseline_penalties)

    def to_dict(self) -> dict:
        out = {k: getattr(self, k) for k in self.__dataclass_fields__ if k not in ("mode", "stem")}
        out["mode"] = self.mode.value
        out["stem"] = self.stem.to_dict()
        return out

    @classmethod
    def from_dict(cls, raw: dict) -> "ModelConfig":
        known = set(cls.__dataclass_fields__)
        unknown = set(raw) - known
        if unknown:
            raise ValueError(f"unknown model config keys: {sorted(unknown)}")
        return cls(**raw)

    def with_(self, **kw) -> "ModelConfig":
        return replace(self, **kw)


@dataclass
class Expert:
    w1: Param
    b1: Param
    w2: Param
    b2: Param

    @property
    def params(self) -> list[Param]:
        return [self.w1, self.b1, self.w2, self.b2]

    def forward(self, tape: Tape, z: Var) -> Var:
        h = tape.relu(tape.linear(z, self.w1, self.b1))
        return tape.linear(h, self.w2, self.b2)


@dataclass
class MoELayer:
    proc_w: Param
    proc_b: Param
    ln_gain: Param
    ln_shift: Param
    prototypes: Param  # (K, d), row i is prototype i
    experts: list[Expert]
    gate: Param | None = None  # (d, K), baseline routing only

    @property
    def n_experts(self) -> int:
        return len(self.experts)

    @property
    def router_params(self) -> list[Param]:
        base = [self.proc_w, self.proc_b, self.ln_gain, self.ln_shift, self.prototypes]
        return base + ([self.gate] if self.gate is not None else [])

    @property
    def params(self) -> list[Param]:
        out = self.router_params
        for e in self.experts:
            out = out + e.params
        return out

    def process(self, tape: Tape, z_in: Var) -> Var:
        h = tape.relu(tape.linear(z_in, self.proc_w, self.proc_b))
        return tape.layer_norm(h, self.ln_gain, self.ln_shift)


class RoutingRecord(NamedTuple):
    weights: np.ndarray  # (batch, K) routing distribution per sample
    winners: np.ndarray  # (batch,) argmax expert, ties -> lowest index


# ---------------------------------------------------------------------------
# Routing and mixing
# ---------------------------------------------------------------------------

def pairwise_distance(tape: Tape, z: Var, mu: Var) -> Var:
    """Euclidean distances ``||z_b - mu_i||`` as a (batch, K) matrix."""
    diff = z.value[:, None, :] - mu.value[None, :, :]
    dist = np.sqrt(np.sum(diff * diff, axis=-1))
    out = Var(dist)

    def back():
        g = out.grad
        if g is None:
            return
        # subgradient 0 where the point sits exactly on a prototype
        safe = np.where(dist > 0, dist, 1.0)
        coef = np.where(dist > 0, g / safe, 0.0)[..., None] * diff
        z._accum(coef.sum(axis=1))
        mu._accum(-coef.sum(axis=0))

    tape.record(back)
    return out


def route(tape: Tape, z_prime: Var, layer: MoELayer, mode: RoutingMode, tau: float = 1.0) -> Var:
    """Routing distribution over the layer's experts, one row per sample."""
    mode = RoutingMode(mode)
    if mode.uses_prototypes:
        dist = pairwise_distance(tape, z_prime, layer.prototypes)
        return tape.softmax(tape.scale(dist, -1.0 / tau))
    if layer.gate is None:
        raise ValueError("baseline routing needs a gate matrix")
    return tape.softmax(tape.matmul(z_prime, layer.gate))


def mix(tape: Tape, w: Var, outputs: Sequence[Var]) -> Var:
    """``sum_i w[:, i] * outputs[i]``."""
    wv = w.value
    out = Var(sum(wv[:, i:i + 1] * o.value for i, o in enumerate(outputs)))

    def back():
        g = out.grad
        if g is None:
            return
        w._accum(np.stack([(g * o.value).sum(axis=1) for o in outputs], axis=1))
        for i, o in enumerate(outputs):
            o._accum(wv[:, i:i + 1] * g)

    tape.record(back)
    return out


def winners_of(weights: np.ndarray) -> np.ndarray:
    # np.argmax returns the first maximum, i.e. the lowest index on ties
    return np.argmax(weights, axis=1)


def _layer_forward(tape: Tape, z_in: Var, layer: MoELayer, mode: RoutingMode, tau: float,
                   hard: bool) -> tuple[Var, RoutingRecord, Var]:
    z_prime = layer.process(tape, z_in)
    w = route(tape, z_prime, layer, mode, tau)
    record = RoutingRecord(w.value.copy(), winners_of(w.value))
    mix_w = w
    if hard:
        onehot = np.zeros_like(w.value)
        onehot[np.arange(onehot.shape[0]), record.winners] = 1.0
        mix_w = Var(onehot)
    outs = [e.forward(tape, z_prime) for e in layer.experts]
    return mix(tape, mix_w, outs), record, w


def moe_layer_forward(
    tape: Tape, z_in: Var, layer: MoELayer, mode: RoutingMode, tau: float = 1.0,
    hard: bool = False,
) -> tuple[Var, RoutingRecord]:
    """Local processor, routing, then the dense weighted sum of all experts.

    ``hard=True`` replaces the soft weights by a one-hot on the winning expert
    for the mixture (no gradient reaches the router in that case).
    """
    z_out, record, _ = _layer_forward(tape, z_in, layer, RoutingMode(mode), tau, hard)
    return z_out, record


# ---------------------------------------------------------------------------
# Regularisers
# ---------------------------------------------------------------------------

def _var(x) -> Var:
    return x if isinstance(x, Var) else Var(linalg.as_mat(x))


def spec_norm_penalty(w, sigma_t: float, tape: Tape | None = None,
                      max_iters: int = linalg.DEFAULT_MAX_ITERS,
                      tol: float = linalg.DEFAULT_TOL,
                      top: linalg.SingularTriplet | None = None) -> Var:
    """``(sigma_max(W) - sigma_t)^2``.

    The gradient ``2 (sigma - sigma_t) u v^T`` uses the power-iteration
    singular pair as constants.  A zero matrix yields ``sigma_t^2`` and a zero
    gradient.  ``top`` may carry a precomputed singular triplet of ``w``.
    """
    tape = tape if tape is not None else Tape(record=False)
    w = _var(w)
    top = top if top is not None else linalg.top_singular(w.value, max_iters, tol)
    out = Var((top.sigma - sigma_t) ** 2)

    def back():
        if out.grad is not None and top.sigma > 0:
            w._accum(out.grad * 2.0 * (top.sigma - sigma_t) * np.outer(top.u, top.v))

    tape.record(back)
    return out


def rank_penalty(w, rho_t: float, tape: Tape | None = None,
                 max_iters: int = linalg.DEFAULT_MAX_ITERS,
                 tol: float = linalg.DEFAULT_TOL,
                 top: linalg.SingularTriplet | None = None) -> Var:
    """``(||W||_F^2 / sigma_max^2 - rho_t)^2``; raises on a zero matrix."""
    tape = tape if tape is not None else Tape(record=False)
    w = _var(w)
    top = top if top is not None else linalg.top_singular(w.value, max_iters, tol)
    if top.sigma == 0.0:
        raise ValueError("stable rank is undefined for a zero matrix")
    fro2 = float(np.sum(w.value * w.value))
    s2 = top.sigma ** 2
    r = fro2 / s2
    out = Var((r - rho_t) ** 2)

    def back():
        if out.grad is None:
            return
        dr = 2.0 * w.value / s2 - (2.0 * fro2 / (s2 * top.sigma)) * np.outer(top.u, top.v)
        w._accum(out.grad * 2.0 * (r - rho_t) * dr)

    tape.record(back)
    return out


def diversity_loss(weights, tape: Tape | None = None) -> Var:
    """Squared coefficient of variation of the mean routing weight per expert.

    Uses the population standard deviation, so a batch routed one-hot to a
    single expert out of ``K`` scores exactly ``K - 1``.
    """
    tape = tape if tape is not None else Tape(record=False)
    w = weights if isinstance(weights, Var) else Var(linalg.as_mat(weights))
    bsz, k = w.shape
    p = w.value.mean(axis=0)
    m = p.mean()
    var = np.mean((p - m) ** 2)
    out = Var(var / m**2)

    def back():
        if out.grad is None:
            return
        dp = 2.0 * (p - m) / (k * m**2) - 2.0 * var / (k * m**3)
        w._accum(np.broadcast_to(out.grad * dp / bsz, (bsz, k)))

    tape.record(back)
    return out


# ---------------------------------------------------------------------------
# Model
# ---------------------------------------------------------------------------

def _init_layer(cfg: ModelConfig, rng: np.random.Generator) -> MoELayer:
    d, h, k = cfg.d, cfg.hidden, cfg.n_experts
    protos = rng.normal(size=(k, d))
    protos /= np.linalg.norm(protos, axis=1, keepdims=True)
    experts = [
        Expert(
            Param(he_normal(rng, (d, h), d)), Param(np.zeros(h)),
            Param(he_normal(rng, (h, d), h)), Param(np.zeros(d)),
        )
        for _ in range(k)
    ]
    gate = None
    if cfg.mode is RoutingMode.BASELINE:
        std = cfg.gate_init_std if cfg.gate_init_std is not None else 1.0 / np.sqrt(d)
        gate = Param(rng.normal(0.0, std, size=(d, k)))
    return MoELayer(
        proc_w=Param(he_normal(rng, (d, d), d)),
        proc_b=Param(np.zeros(d)),
        ln_gain=Param(np.ones(d)),
        ln_shift=Param(np.zeros(d)),
        prototypes=Param(protos),
        experts=experts,
        gate=gate,
    )


@dataclass
class SrMoeModel:
    cfg: ModelConfig
    stem: ConvStem
    layers: list[MoELayer]
    head_w: Param
    head_b: Param
    hard_routing: bool = False

    def __post_init__(self):
        self._name_params()

    @classmethod
    def init(cls, cfg: ModelConfig) -> "SrMoeModel":
        rng = np.random.default_rng(cfg.seed)
        stem = ConvStem.init(cfg.stem, rng)
        layers = [_init_layer(cfg, rng) for _ in range(cfg.n_layers)]
        head_w = Param(rng.normal(0.0, np.sqrt(1.0 / cfg.d), size=(cfg.d, cfg.num_classes)))
        head_b = Param(np.zeros(cfg.num_classes))
        return cls(cfg, stem, layers, head_w, head_b)

    def _name_params(self) -> None:
        for li, layer in enumerate(self.layers):
            pre = f"layer{li}"
            layer.proc_w.name, layer.proc_b.name = f"{pre}.proc.w", f"{pre}.proc.b"
            layer.ln_gain.name, layer.ln_shift.name = f"{pre}.ln.gain", f"{pre}.ln.shift"
            layer.prototypes.name = f"{pre}.prototypes"
            if layer.gate is not None:
                layer.gate.name = f"{pre}.gate"
            for ei, e in enumerate(layer.experts):
                for p, tag in zip(e.params, ("w1", "b1", "w2", "b2")):
                    p.name = f"{pre}.expert{ei}.{tag}"
        self.head_w.name, self.head_b.name = "head.w", "head.b"

    def params(self) -> list[Param]:
        out = list(self.stem.params)
        for layer in self.layers:
            out.extend(layer.params)
        return out + [self.head_w, self.head_b]

    def named_params(self) -> dict[str, Param]:
        return {p.name: p for p in self.params()}

    def penalty_targets(self) -> list[Param]:
        """Matrices that carry the spectral-norm and stable-rank terms."""
        if not self.cfg.penalized:
            return []
        if self.cfg.mode is RoutingMode.BASELINE:
            return [layer.gate for layer in self.layers]
        return [layer.proc_w for layer in self.layers]

    def rho_target(self, w: Param) -> float:
        if self.cfg.rho_t is not None:
            return self.cfg.rho_t
        return min(w.shape) / 2.0

    def set_trainable(self, flag: bool) -> None:
        for p in self.params():
            p.trainable = flag

    def embed(self, tape: Tape, x) -> Var:
        return self.stem.forward(tape, x)

    def forward_from_embedding(self, tape: Tape, z0: Var) -> tuple[Var, list[RoutingRecord], list[Var]]:
        """Layers and head on stem features; also returns the weight Vars for the diversity term."""
        z = z0
        records, weight_vars = [], []
        for layer in self.layers:
            z, rec, w = _layer_forward(tape, z, layer, self.cfg.mode, self.cfg.tau, self.hard_routing)
            records.append(rec)
            weight_vars.append(w)
        logits = tape.linear(z, self.head_w, self.head_b)
        return logits, records, weight_vars


def model_forward(model: SrMoeModel, x, tape: Tape | None = None) -> tuple[Var, list[RoutingRecord]]:
    tape = tape if tape is not None else Tape(record=False)
    logits, records, _ = model.forward_from_embedding(tape, model.embed(tape, x))
    return logits, records


def regularized_loss(model: SrMoeModel, tape: Tape, logits: Var, labels,
                     weight_vars: Sequence[Var]) -> tuple[Var, dict[str, float]]:
    """Cross-entropy plus the configured spectral and diversity terms."""
    cfg = model.cfg
    task = tape.cross_entropy(logits, labels)
    terms, coefs = [task], [1.0]
    breakdown = {"task": float(task.value)}

    targets = model.penalty_targets()
    if targets:
        tops = [linalg.top_singular(w.value, cfg.power_iters, cfg.power_tol) for w in targets]
        spec = [spec_norm_penalty(w, cfg.sigma_t, tape, top=t) for w, t in zip(targets, tops)]
        rank = [rank_penalty(w, model.rho_target(w), tape, top=t) for w, t in zip(targets, tops)]
        terms += spec + rank
        coefs += [cfg.alpha] * (len(spec) + len(rank))
        breakdown["spec"] = float(sum(float(s.value) for s in spec))
        breakdown["rank"] = float(sum(float(r.value) for r in rank))

    div = [diversity_loss(w, tape) for w in weight_vars]
    terms += div
    coefs += [cfg.beta / len(div)] * len(div)
    breakdown["div"] = float(np.mean([float(v.value) for v in div]))

    total = tape.weighted_sum(terms, coefs)
    breakdown["total"] = float(total.value)
    return total, breakdown


def total_loss(model: SrMoeModel, x, labels, tape: Tape | None = None) -> tuple[Var, dict[str, float]]:
    tape = tape if tape is not None else Tape(record=False)
    logits, _, weight_vars = model.forward_from_embedding(tape, model.embed(tape, x))
    return regularized_loss(model, tape, logits, labels, weight_vars)


def predict(model: SrMoeModel, x, batch_size: int = 512) -> tuple[np.ndarray, list[np.ndarray]]:
    """Class predictions and per-layer routing weights for a dataset."""
    preds, weights = [], [[] for _ in model.layers]
    for start in range(0, len(x), batch_size):
        logits, recs = model_forward(model, x[start:start + batch_size])
        preds.append(np.argmax(logits.value, axis=1))
        for li, r in enumerate(recs):
            weights[li].append(r.weights)
    if not preds:
        return np.zeros(0, dtype=np.int64), [np.zeros((0, model.cfg.n_experts)) for _ in model.layers]
    return np.concatenate(preds), [np.concatenate(w) for w in weights]

