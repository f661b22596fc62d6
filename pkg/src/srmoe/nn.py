"""Reverse-mode gradients for a fixed vocabulary of layers.

A :class:`Tape` records one backward closure per operation.  Calling
:meth:`Tape.backward` on a scalar output replays those closures in reverse
order, accumulating into ``.grad`` of every :class:`Var` that was touched, and
then empties the tape so per-batch state never outlives a step.

Only the layers this project needs are provided: linear, ReLU, LayerNorm,
2-D convolution, max pooling, adaptive average pooling, softmax and
cross-entropy.  Arbitrary graph autodiff is deliberately out of reach.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np

from .linalg import ShapeError

FD_STEP = 1e-6
LN_EPS = 1e-5


class Var:
    """A value flowing through the tape with an optional gradient."""

    __slots__ = ("value", "grad")

    def __init__(self, value):
        self.value = np.asarray(value, dtype=np.float64)
        self.grad = None

    @property
    def shape(self):
        return self.value.shape

    def _accum(self, g) -> None:
        if self.grad is None:
            self.grad = np.array(g, dtype=np.float64, copy=True).reshape(self.value.shape)
        else:
            self.grad += g

    def __repr__(self) -> str:
        return f"{type(self).__name__}(shape={self.value.shape})"


class Param(Var):
    """A learnable tensor; ``grad`` always has the same shape as ``value``."""

    __slots__ = ("name", "trainable")

    def __init__(self, value, name: str = "", trainable: bool = True):
        super().__init__(np.array(value, dtype=np.float64, copy=True))
        self.grad = np.zeros_like(self.value)
        self.name = name
        self.trainable = trainable

    def _accum(self, g) -> None:
        self.grad += g

    def zero_grad(self) -> None:
        self.grad.fill(0.0)


def _unbroadcast(g: np.ndarray, shape) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


class Tape:
    """Records backward rules for the operations applied to :class:`Var` s.

    With ``record=False`` the same methods only compute forward values, which
    is what inference and finite differencing use.
    """

    def __init__(self, record: bool = True):
        self.record_enabled = record
        self.nodes: list[Callable[[], None]] = []

    def __len__(self) -> int:
        return len(self.nodes)

    def record(self, backward: Callable[[], None]) -> None:
        if self.record_enabled:
            self.nodes.append(backward)

    def clear(self) -> None:
        self.nodes.clear()

    def backward(self, loss: Var) -> None:
        if loss.value.size != 1:
            raise ShapeError("backward needs a scalar loss")
        loss.grad = np.ones_like(loss.value)
        for fn in reversed(self.nodes):
            fn()
        self.nodes.clear()

    # -- elementwise / algebra -------------------------------------------
    def add(self, a: Var, b: Var) -> Var:
        out = Var(a.value + b.value)

        def back():
            if out.grad is not None:
                a._accum(_unbroadcast(out.grad, a.shape))
                b._accum(_unbroadcast(out.grad, b.shape))

        self.record(back)
        return out

    def scale(self, a: Var, c: float) -> Var:
        out = Var(a.value * c)

        def back():
            if out.grad is not None:
                a._accum(out.grad * c)

        self.record(back)
        return out

    def weighted_sum(self, terms: Sequence[Var], coefs: Sequence[float]) -> Var:
        """Scalar ``sum_i coefs[i] * terms[i]``."""
        out = Var(sum(float(c) * t.value for c, t in zip(coefs, terms)))

        def back():
            if out.grad is not None:
                for c, t in zip(coefs, terms):
                    t._accum(out.grad * c)

        self.record(back)
        return out

    def matmul(self, a: Var, b: Var) -> Var:
        if a.value.ndim != 2 or b.value.ndim != 2 or a.shape[1] != b.shape[0]:
            raise ShapeError(f"matmul: {a.shape} x {b.shape}")
        out = Var(a.value @ b.value)

        def back():
            if out.grad is not None:
                a._accum(out.grad @ b.value.T)
                b._accum(a.value.T @ out.grad)

        self.record(back)
        return out

    def linear(self, x: Var, w: Var, bias: Var | None = None) -> Var:
        """``x @ w + bias`` with the bias broadcast over rows."""
        if x.value.ndim != 2 or w.value.ndim != 2 or x.shape[1] != w.shape[0]:
            raise ShapeError(f"linear: input {x.shape} vs weight {w.shape}")
        if bias is not None and bias.value.size != w.shape[1]:
            raise ShapeError(f"linear: bias {bias.shape} vs weight {w.shape}")
        y = x.value @ w.value
        if bias is not None:
            y = y + bias.value.reshape(1, -1)
        out = Var(y)

        def back():
            g = out.grad
            if g is None:
                return
            x._accum(g @ w.value.T)
            w._accum(x.value.T @ g)
            if bias is not None:
                bias._accum(g.sum(axis=0).reshape(bias.shape))

        self.record(back)
        return out

    def relu(self, x: Var) -> Var:
        mask = x.value > 0
        out = Var(np.where(mask, x.value, 0.0))

        def back():
            if out.grad is not None:
                x._accum(out.grad * mask)

        self.record(back)
        return out

    def layer_norm(self, x: Var, gain: Var, shift: Var, eps: float = LN_EPS) -> Var:
        """Per-row standardisation followed by ``gain * xhat + shift``."""
        if x.value.ndim != 2 or x.shape[1] < 2:
            raise ShapeError(f"layer_norm needs (batch, d>=2), got {x.shape}")
        d = x.shape[1]
        mu = x.value.mean(axis=1, keepdims=True)
        xc = x.value - mu
        inv = 1.0 / np.sqrt((xc * xc).mean(axis=1, keepdims=True) + eps)
        xhat = xc * inv
        g_row = gain.value.reshape(1, d)
        out = Var(xhat * g_row + shift.value.reshape(1, d))

        def back():
            g = out.grad
            if g is None:
                return
            gain._accum((g * xhat).sum(axis=0).reshape(gain.shape))
            shift._accum(g.sum(axis=0).reshape(shift.shape))
            dxhat = g * g_row
            dx = inv * (
                dxhat
                - dxhat.mean(axis=1, keepdims=True)
                - xhat * (dxhat * xhat).mean(axis=1, keepdims=True)
            )
            x._accum(dx)

        self.record(back)
        return out

    def reshape(self, x: Var, shape) -> Var:
        out = Var(x.value.reshape(shape))

        def back():
            if out.grad is not None:
                x._accum(out.grad.reshape(x.shape))

        self.record(back)
        return out

    def take_rows(self, x: Var, index) -> Var:
        """Select a subset of rows (``x.value[index]``)."""
        index = np.asarray(index)
        out = Var(x.value[index])

        def back():
            if out.grad is not None:
                g = np.zeros_like(x.value)
                np.add.at(g, index, out.grad)
                x._accum(g)

        self.record(back)
        return out

    # -- convolution stack -----------------------------------------------
    def conv2d(self, x: Var, w: Var, b: Var, stride: int = 1, padding: int = 0) -> Var:
        """Cross-correlation of ``x`` (B, C, H, W) with ``w`` (O, C, k, k)."""
        if x.value.ndim != 4 or w.value.ndim != 4 or x.shape[1] != w.shape[1]:
            raise ShapeError(f"conv2d: input {x.shape} vs kernel {w.shape}")
        bsz, c, h, wd = x.shape
        o, _, k, k2 = w.shape
        if k != k2:
            raise ShapeError("conv2d: only square kernels are supported")
        xp = np.pad(x.value, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
        hp, wp = h + 2 * padding, wd + 2 * padding
        if hp < k or wp < k:
            raise ShapeError(f"conv2d: kernel {k} larger than padded input {(hp, wp)}")
        oh = (hp - k) // stride + 1
        ow = (wp - k) // stride + 1
        win = np.lib.stride_tricks.sliding_window_view(xp, (k, k), axis=(2, 3))
        win = win[:, :, ::stride, ::stride][:, :, :oh, :ow]  # B, C, oh, ow, k, k
        cols = win.transpose(0, 2, 3, 1, 4, 5).reshape(bsz * oh * ow, c * k * k)
        wmat = w.value.reshape(o, c * k * k)
        y = cols @ wmat.T + b.value.reshape(1, o)
        out = Var(y.reshape(bsz, oh, ow, o).transpose(0, 3, 1, 2))

        def back():
            g = out.grad
            if g is None:
                return
            gf = g.transpose(0, 2, 3, 1).reshape(bsz * oh * ow, o)
            w._accum((gf.T @ cols).reshape(w.shape))
            b._accum(gf.sum(axis=0).reshape(b.shape))
            dcols = (gf @ wmat).reshape(bsz, oh, ow, c, k, k)
            dxp = np.zeros_like(xp)
            hs = stride * (oh - 1) + 1
            ws = stride * (ow - 1) + 1
            for i in range(k):
                for j in range(k):
                    dxp[:, :, i:i + hs:stride, j:j + ws:stride] += dcols[:, :, :, :, i, j].transpose(0, 3, 1, 2)
            x._accum(dxp[:, :, padding:padding + h, padding:padding + wd])

        self.record(back)
        return out

    def max_pool(self, x: Var, size: int) -> Var:
        """Non-overlapping ``size x size`` max pooling; trailing rows/cols are dropped."""
        if size == 1:
            return x
        bsz, c, h, wd = x.shape
        oh, ow = h // size, wd // size
        if oh == 0 or ow == 0:
            raise ShapeError(f"max_pool: window {size} larger than input {(h, wd)}")
        crop = x.value[:, :, :oh * size, :ow * size]
        blocks = crop.reshape(bsz, c, oh, size, ow, size).transpose(0, 1, 2, 4, 3, 5)
        blocks = blocks.reshape(bsz, c, oh, ow, size * size)
        arg = blocks.argmax(axis=-1)
        out = Var(np.take_along_axis(blocks, arg[..., None], axis=-1)[..., 0])

        def back():
            g = out.grad
            if g is None:
                return
            db = np.zeros((bsz, c, oh, ow, size * size))
            np.put_along_axis(db, arg[..., None], g[..., None], axis=-1)
            db = db.reshape(bsz, c, oh, ow, size, size).transpose(0, 1, 2, 4, 3, 5)
            dx = np.zeros_like(x.value)
            dx[:, :, :oh * size, :ow * size] = db.reshape(bsz, c, oh * size, ow * size)
            x._accum(dx)

        self.record(back)
        return out

    def adaptive_avg_pool(self, x: Var, out_hw: tuple[int, int]) -> Var:
        bsz, c, h, wd = x.shape
        ph = adaptive_pool_matrix(h, out_hw[0])
        pw = adaptive_pool_matrix(wd, out_hw[1])
        out = Var(np.einsum("ih,bchw,jw->bcij", ph, x.value, pw))

        def back():
            if out.grad is not None:
                x._accum(np.einsum("ih,bcij,jw->bchw", ph, out.grad, pw))

        self.record(back)
        return out

    # -- classification --------------------------------------------------
    def softmax(self, x: Var) -> Var:
        s = softmax_rows(x.value)
        out = Var(s)

        def back():
            g = out.grad
            if g is not None:
                x._accum(s * (g - (g * s).sum(axis=1, keepdims=True)))

        self.record(back)
        return out

    def cross_entropy(self, logits: Var, labels) -> Var:
        """Mean of ``-log softmax(logits)[label]`` over the batch."""
        labels = np.asarray(labels, dtype=np.int64)
        bsz, ncls = logits.shape
        if labels.shape != (bsz,):
            raise ShapeError(f"cross_entropy: {labels.shape[0] if labels.ndim else 0} labels for batch {bsz}")
        if labels.size and (labels.min() < 0 or labels.max() >= ncls):
            raise ValueError(f"labels must lie in [0, {ncls})")
        z = logits.value - logits.value.max(axis=1, keepdims=True)
        logsum = np.log(np.exp(z).sum(axis=1, keepdims=True))
        logp = z - logsum
        out = Var(-logp[np.arange(bsz), labels].mean())

        def back():
            if out.grad is None:
                return
            g = np.exp(logp)
            g[np.arange(bsz), labels] -= 1.0
            logits._accum(g * (out.grad / bsz))

        self.record(back)
        return out


def softmax_rows(x: np.ndarray) -> np.ndarray:
    z = x - x.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def adaptive_pool_matrix(n_in: int, n_out: int) -> np.ndarray:
    """Averaging matrix with the usual ``floor``/``ceil`` adaptive window bounds."""
    m = np.zeros((n_out, n_in))
    for i in range(n_out):
        lo = (i * n_in) // n_out
        hi = -((-(i + 1) * n_in) // n_out)
        m[i, lo:hi] = 1.0 / (hi - lo)
    return m


# ---------------------------------------------------------------------------
# Initialisation, optimisation and gradient checking
# ---------------------------------------------------------------------------

def he_normal(rng: np.random.Generator, shape, fan_in: int) -> np.ndarray:
    return rng.normal(0.0, np.sqrt(2.0 / fan_in), size=shape)


def sgd_step(params: Iterable[Param], lr: float) -> None:
    """Plain SGD; frozen params are never written to."""
    if lr == 0.0:
        return
    for p in params:
        if p.trainable:
            p.value -= lr * p.grad


def zero_grads(params: Iterable[Param]) -> None:
    for p in params:
        p.zero_grad()


def grad_check(
    f: Callable[[Tape], Var],
    params: Sequence[Param],
    step: float = FD_STEP,
    floor: float = 1e-6,
    max_coords: int | None = None,
    rng: np.random.Generator | None = None,
) -> float:
    """Worst relative error between tape gradients and central differences.

    ``f`` builds a scalar loss on the tape it is given.  Only trainable
    params are probed.  Each coordinate's error is
    ``|analytic - numeric| / max(|analytic|, |numeric|, floor)``; the floor
    keeps gradients that are zero up to rounding from dominating.  When
    ``max_coords`` is set, that many coordinates per param are sampled with
    ``rng`` instead of probing all of them.
    """
    if step <= 0:
        raise ValueError("step must be positive")
    params = [p for p in params if p.trainable]
    zero_grads(params)
    tape = Tape()
    loss = f(tape)
    tape.backward(loss)
    analytic = [p.grad.copy() for p in params]
    rng = rng if rng is not None else np.random.default_rng(0)

    worst = 0.0
    for p, ga in zip(params, analytic):
        flat = p.value.reshape(-1)
        idx = np.arange(flat.size)
        if max_coords is not None and flat.size > max_coords:
            idx = rng.choice(flat.size, size=max_coords, replace=False)
        gflat = ga.reshape(-1)
        for i in idx:
            orig = flat[i]
            flat[i] = orig + step
            fp = float(f(Tape(record=False)).value)
            flat[i] = orig - step
            fm = float(f(Tape(record=False)).value)
            flat[i] = orig
            num = (fp - fm) / (2.0 * step)
            a = gflat[i]
            err = abs(a - num) / max(abs(a), abs(num), floor)
            worst = max(worst, err)
    zero_grads(params)
    return worst


# ---------------------------------------------------------------------------
# Convolutional stem
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class ConvSpec:
    out_channels: int
    kernel: int = 3
    stride: int = 1
    padding: int = 1
    pool: int = 2  # max-pool window after the ReLU; 1 disables pooling


@dataclass(frozen=True)
class StemConfig:
    in_channels: int = 1
    height: int = 16
    width: int = 16
    convs: tuple[ConvSpec, ...] = (ConvSpec(8), ConvSpec(16))
    pool_out: tuple[int, int] = (4, 4)
    embed_dim: int = 32

    def __post_init__(self):
        if min(self.in_channels, self.height, self.width, self.embed_dim) < 1:
            raise ValueError("stem dimensions must be positive")
        object.__setattr__(self, "convs", tuple(
            c if isinstance(c, ConvSpec) else ConvSpec(**c) for c in self.convs))
        object.__setattr__(self, "pool_out", tuple(self.pool_out))
        self.feature_shape()  # validates the geometry

    def feature_shape(self) -> tuple[int, int, int]:
        """(channels, height, width) entering the adaptive pool."""
        c, h, w = self.in_channels, self.height, self.width
        for spec in self.convs:
            h = (h + 2 * spec.padding - spec.kernel) // spec.stride + 1
            w = (w + 2 * spec.padding - spec.kernel) // spec.stride + 1
            if h < 1 or w < 1:
                raise ValueError(f"conv stack collapses the image at {spec}")
            h, w = h // spec.pool, w // spec.pool
            if h < 1 or w < 1:
                raise ValueError(f"max-pool collapses the image at {spec}")
            c = spec.out_channels
        return c, h, w

    @property
    def flat_dim(self) -> int:
        c, _, _ = self.feature_shape()
        return c * self.pool_out[0] * self.pool_out[1]

    def to_dict(self) -> dict:
        return {
            "in_channels": self.in_channels,
            "height": self.height,
            "width": self.width,
            "convs": [vars(c).copy() for c in self.convs],
            "pool_out": list(self.pool_out),
            "embed_dim": self.embed_dim,
        }


@dataclass
class ConvStem:
    """conv -> ReLU -> maxpool blocks, adaptive average pool, linear to ``embed_dim``."""

    cfg: StemConfig
    params: list[Param] = field(default_factory=list)

    @classmethod
    def init(cls, cfg: StemConfig, rng: np.random.Generator) -> "ConvStem":
        params = []
        c = cfg.in_channels
        for i, spec in enumerate(cfg.convs):
            fan_in = c * spec.kernel * spec.kernel
            params.append(Param(he_normal(rng, (spec.out_channels, c, spec.kernel, spec.kernel), fan_in),
                                f"stem.conv{i}.w"))
            params.append(Param(np.zeros(spec.out_channels), f"stem.conv{i}.b"))
            c = spec.out_channels
        params.append(Param(he_normal(rng, (cfg.flat_dim, cfg.embed_dim), cfg.flat_dim), "stem.proj.w"))
        params.append(Param(np.zeros(cfg.embed_dim), "stem.proj.b"))
        return cls(cfg, params)

    def forward(self, tape: Tape, x) -> Var:
        x = x if isinstance(x, Var) else Var(x)
        cfg = self.cfg
        expect = (cfg.in_channels, cfg.height, cfg.width)
        if x.value.ndim != 4 or x.shape[1:] != expect:
            raise ShapeError(f"stem expects (batch, {expect}), got {x.shape}")
        h = x
        for i, spec in enumerate(cfg.convs):
            w, b = self.params[2 * i], self.params[2 * i + 1]
            h = tape.conv2d(h, w, b, spec.stride, spec.padding)
            h = tape.relu(h)
            h = tape.max_pool(h, spec.pool)
        h = tape.adaptive_avg_pool(h, cfg.pool_out)
        h = tape.reshape(h, (x.shape[0], cfg.flat_dim))
        return tape.linear(h, self.params[-2], self.params[-1])
