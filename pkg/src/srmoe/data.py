"""Synthetic image classes, stratified splits and the ``.srmt`` tensor file.

Tensor file layout (all little-endian)::

    offset  size  field
    0       4     magic  b"SRMT"
    4       2     version (uint16, currently 1)
    6       1     split tag (0 all, 1 train, 2 val, 3 test, 4 novel)
    7       1     reserved, 0
    8       8     sample count n (uint64)
    16      4     channels C (uint32)
    20      4     height H (uint32)
    24      4     width W (uint32)
    28      4     class count (uint32)
    32      8*n*C*H*W   images, float64, sample-major then C, H, W
    ...     8*n         labels, int64

The file must end exactly after the labels.
"""
from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

MAGIC = b"SRMT"
VERSION = 1
_HEADER = struct.Struct("<4sHBBQIIII")
SPLITS = ("all", "train", "val", "test", "novel")


class TensorFileError(ValueError):
    """The file is not a well-formed tensor file."""


@dataclass
class Dataset:
    images: np.ndarray  # (n, C, H, W) float64
    labels: np.ndarray  # (n,) int64
    num_classes: int
    split: str = "all"

    def __post_init__(self):
        self.images = np.asarray(self.images, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.images.ndim != 4:
            raise ValueError(f"images must be (n, C, H, W), got {self.images.shape}")
        if self.labels.shape != (self.images.shape[0],):
            raise ValueError("labels must have one entry per image")
        if self.split not in SPLITS:
            raise ValueError(f"unknown split tag {self.split!r}")
        if self.labels.size and (self.labels.min() < 0 or self.labels.max() >= self.num_classes):
            raise ValueError("labels out of range")

    def __len__(self) -> int:
        return int(self.labels.shape[0])

    @property
    def image_shape(self) -> tuple[int, int, int]:
        return tuple(self.images.shape[1:])

    def subset(self, index, split: str | None = None) -> "Dataset":
        index = np.asarray(index, dtype=np.int64)
        return Dataset(self.images[index], self.labels[index], self.num_classes,
                       split if split is not None else self.split)

    def class_counts(self) -> np.ndarray:
        return np.bincount(self.labels, minlength=self.num_classes)


def class_template(c: int, classes: int, shape=(1, 16, 16), phase: float = 0.0) -> np.ndarray:
    """Sinusoidal grating; class ``c`` fixes orientation and frequency."""
    ch, h, w = shape
    n_orient = min(classes, 4)
    angle = (c % n_orient) * np.pi / n_orient
    cycles = 2.0 + (c // n_orient)
    yy, xx = np.meshgrid(np.arange(h) / h, np.arange(w) / w, indexing="ij")
    proj = xx * np.cos(angle) + yy * np.sin(angle)
    img = np.sin(2.0 * np.pi * cycles * proj + phase)
    return np.broadcast_to(img, (ch, h, w)).copy()


def generate_synthetic(classes: int = 4, per_class: int = 400, seed: int = 0, noise: float = 0.3,
                       nonlinear: bool = False, shape=(1, 16, 16)) -> Dataset:
    """Grating classes plus i.i.d. Gaussian pixel noise.

    With ``nonlinear=True`` every sample gets a random phase, which zeroes the
    class means, so no linear function of the raw pixels separates the
    classes; orientation must be detected from local energy instead.
    """
    if classes < 2:
        raise ValueError("need at least 2 classes")
    if per_class < 10:
        raise ValueError("need at least 10 samples per class")
    rng = np.random.default_rng(seed)
    images = np.empty((classes * per_class, *shape))
    labels = np.repeat(np.arange(classes), per_class)
    for c in range(classes):
        phases = rng.uniform(0.0, 2 * np.pi, per_class) if nonlinear else np.zeros(per_class)
        for j in range(per_class):
            images[c * per_class + j] = class_template(c, classes, shape, phases[j])
    images += rng.normal(0.0, noise, size=images.shape) if noise > 0 else 0.0
    return Dataset(images, labels, classes, "all")


def split(dataset: Dataset, ratios=(0.7, 0.15, 0.15), novel_per_class: int = 0,
          seed: int = 0) -> dict[str, Dataset]:
    """Stratified train/val/test/novel partition.

    The novel samples are drawn out per class first; the rest is divided by
    ``ratios`` with per-class counts rounded so every split is within one
    sample of its exact share.
    """
    ratios = tuple(float(r) for r in ratios)
    if len(ratios) != 3 or min(ratios) < 0 or abs(sum(ratios) - 1.0) > 1e-9:
        raise ValueError(f"ratios must be three non-negative numbers summing to 1, got {ratios}")
    if novel_per_class < 0:
        raise ValueError("novel_per_class must be >= 0")
    rng = np.random.default_rng(seed)
    parts: dict[str, list[np.ndarray]] = {k: [] for k in ("train", "val", "test", "novel")}
    for c in range(dataset.num_classes):
        idx = np.flatnonzero(dataset.labels == c)
        need = novel_per_class + sum(1 for r in ratios if r > 0)
        if idx.size < need:
            raise ValueError(f"class {c} has {idx.size} samples, needs at least {need}")
        idx = idx[rng.permutation(idx.size)]
        parts["novel"].append(idx[:novel_per_class])
        rest = idx[novel_per_class:]
        n = rest.size
        n_train = int(np.floor(n * ratios[0] + 0.5))
        n_val = int(np.floor(n * ratios[1] + 0.5))
        n_val = min(n_val, n - n_train)
        parts["train"].append(rest[:n_train])
        parts["val"].append(rest[n_train:n_train + n_val])
        parts["test"].append(rest[n_train + n_val:])
    return {k: dataset.subset(np.sort(np.concatenate(v)), k) for k, v in parts.items()}


def save_tensor_file(dataset: Dataset, path) -> None:
    n = len(dataset)
    c, h, w = dataset.image_shape
    header = _HEADER.pack(MAGIC, VERSION, SPLITS.index(dataset.split), 0, n, c, h, w,
                          dataset.num_classes)
    with open(path, "wb") as fh:
        fh.write(header)
        fh.write(dataset.images.astype("<f8").tobytes())
        fh.write(dataset.labels.astype("<i8").tobytes())


def load_tensor_file(path) -> Dataset:
    raw = Path(path).read_bytes()
    if len(raw) < _HEADER.size:
        raise TensorFileError(f"{path}: truncated header ({len(raw)} bytes)")
    magic, version, tag, _, n, c, h, w, classes = _HEADER.unpack_from(raw)
    if magic != MAGIC:
        raise TensorFileError(f"{path}: bad magic {magic!r}")
    if version != VERSION:
        raise TensorFileError(f"{path}: unsupported version {version}")
    if tag >= len(SPLITS):
        raise TensorFileError(f"{path}: bad split tag {tag}")
    n_img = n * c * h * w
    expected = _HEADER.size + 8 * n_img + 8 * n
    if len(raw) != expected:
        raise TensorFileError(f"{path}: expected {expected} bytes, found {len(raw)}")
    off = _HEADER.size
    images = np.frombuffer(raw, dtype="<f8", count=n_img, offset=off).astype(np.float64)
    labels = np.frombuffer(raw, dtype="<i8", count=n, offset=off + 8 * n_img).astype(np.int64)
    try:
        return Dataset(images.reshape(n, c, h, w), labels, classes, SPLITS[tag])
    except ValueError as exc:
        raise TensorFileError(f"{path}: {exc}") from exc
