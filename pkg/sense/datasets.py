"""
Datasets: seeded synthetic samples for the three analytic settings, MNIST
IDX ingestion and seeded batching / stratified subsetting.

Every random draw in the package goes through `make_rng(seed, stream)`, a
counter-based Philox generator keyed by the run seed and a stream name, so
shuffling, attacks and evaluation never share state.
"""

from __future__ import annotations

import gzip
import logging
import os
import struct
import zlib
from dataclasses import dataclass
from pathlib import Path
from typing import Iterator, NamedTuple

import numpy as np
import pandas as pd

from sense.distributions import CheeseHoles, SyntheticDist, ThreeClusters, UniformHalves
from sense.errors import ArtifactError, IdxFormatError, IdxLengthError, InputError, SpecError

log = logging.getLogger(__name__)

IMAGES_MAGIC = 0x00000803
LABELS_MAGIC = 0x00000801

MNIST_FILES = {
    "train": ("train-images-idx3-ubyte", "train-labels-idx1-ubyte"),
    "test": ("t10k-images-idx3-ubyte", "t10k-labels-idx1-ubyte"),
}


def make_rng(seed: int, stream: str) -> np.random.Generator:
    if isinstance(seed, bool) or not isinstance(seed, (int, np.integer)) or seed < 0:
        raise SpecError(f"seed must be a non-negative integer, got {seed!r}")
    key = np.random.SeedSequence([int(seed), zlib.crc32(stream.encode("utf-8"))])
    return np.random.Generator(np.random.Philox(key))


@dataclass(frozen=True)
class LabeledSet:
    inputs: np.ndarray
    labels: np.ndarray
    num_classes: int = 2
    feature_domain: tuple[float, float] | None = None

    def __post_init__(self):
        x = np.array(self.inputs, dtype=np.float64)
        y = np.array(self.labels, dtype=np.int64)
        if x.ndim < 1 or y.shape != (x.shape[0],):
            raise InputError(f"{x.shape[:1]} inputs vs labels of shape {y.shape}")
        if y.size and (y.min() < 0 or y.max() >= self.num_classes):
            raise InputError(f"labels must lie in [0, {self.num_classes})")
        if self.feature_domain is not None and x.size:
            lo, hi = self.feature_domain
            if x.min() < lo or x.max() > hi:
                raise InputError(f"features outside domain [{lo}, {hi}]")
        x.setflags(write=False)
        y.setflags(write=False)
        object.__setattr__(self, "inputs", x)
        object.__setattr__(self, "labels", y)

    def __len__(self) -> int:
        return int(self.labels.shape[0])

    @property
    def feature_shape(self) -> tuple[int, ...]:
        return self.inputs.shape[1:]

    def take(self, indices) -> "LabeledSet":
        idx = np.asarray(indices, dtype=np.int64)
        return LabeledSet(self.inputs[idx], self.labels[idx], self.num_classes, self.feature_domain)

    def class_counts(self) -> np.ndarray:
        return np.bincount(self.labels, minlength=self.num_classes)

    def to_frame(self) -> pd.DataFrame:
        """(x1, x2, y) table for 2-D sets."""
        if self.feature_shape != (2,):
            raise InputError(f"CSV export needs 2-D features, got {self.feature_shape}")
        return pd.DataFrame({"x1": self.inputs[:, 0], "x2": self.inputs[:, 1], "y": self.labels})


# ── Synthetic sampling ────────────────────────────────────────────────────────


def sample(dist: SyntheticDist, n: int, seed: int) -> LabeledSet:
    if n < 1:
        raise SpecError(f"sample size must be >= 1, got {n}")
    rng = make_rng(seed, f"sample/{type(dist).__name__}")

    if isinstance(dist, ThreeClusters):
        y = (rng.random(n) < 0.5).astype(np.int64)
        pick_a = rng.random(n) < dist.p
        means = dist.means
        centers = np.where(
            (y == 1)[:, None],
            np.where(pick_a[:, None], means["A"], means["B"]),
            means["C"],
        )
        x = centers + dist.sigma * rng.standard_normal((n, 2))
        return LabeledSet(x, y)

    if isinstance(dist, (UniformHalves, CheeseHoles)):
        y = (rng.random(n) < dist.p).astype(np.int64)
        x = _half_square(rng, y)
        if isinstance(dist, CheeseHoles):
            # rejection sampling keeps the class draw and resamples the point
            pending = ~dist.in_support(x)
            while pending.any():
                x[pending] = _half_square(rng, y[pending])
                pending[pending] = ~dist.in_support(x[pending])
        return LabeledSet(x, y)

    raise SpecError(f"unknown synthetic distribution {dist!r}")


def _half_square(rng: np.random.Generator, y: np.ndarray) -> np.ndarray:
    x1 = 0.5 * rng.random(y.shape[0]) + 0.5 * y
    x2 = rng.random(y.shape[0])
    return np.column_stack([x1, x2])


# ── MNIST ─────────────────────────────────────────────────────────────────────


def _read_idx(path) -> bytes:
    path = Path(path)
    if not path.exists():
        raise ArtifactError(path, "file not found")
    opener = gzip.open if path.suffix == ".gz" else open
    try:
        with opener(path, "rb") as f:
            return f.read()
    except OSError as e:
        raise ArtifactError(path, str(e)) from e


def _parse_header(raw: bytes, path, magic: int, dims: int) -> tuple[int, ...]:
    need = 4 * (1 + dims)
    if len(raw) < need:
        raise IdxLengthError(f"{path}: header needs {need} bytes, file has {len(raw)}")
    fields = struct.unpack(f">{1 + dims}I", raw[:need])
    if fields[0] != magic:
        raise IdxFormatError(
            f"{path}: magic number mismatch, expected 0x{magic:08x}, got 0x{fields[0]:08x}"
        )
    return fields[1:]


def load_mnist(images_path, labels_path) -> LabeledSet:
    """Parse an IDX image/label pair; pixels are scaled to [0, 1] by /255."""
    raw_images = _read_idx(images_path)
    count, rows, cols = _parse_header(raw_images, images_path, IMAGES_MAGIC, 3)
    payload = raw_images[16:]
    if len(payload) < count * rows * cols:
        raise IdxLengthError(
            f"{images_path}: header promises {count}x{rows}x{cols} pixels, "
            f"payload has {len(payload)} bytes"
        )
    pixels = np.frombuffer(payload, dtype=np.uint8, count=count * rows * cols)

    raw_labels = _read_idx(labels_path)
    (n_labels,) = _parse_header(raw_labels, labels_path, LABELS_MAGIC, 1)
    if len(raw_labels) - 8 < n_labels:
        raise IdxLengthError(
            f"{labels_path}: header promises {n_labels} labels, "
            f"payload has {len(raw_labels) - 8} bytes"
        )
    if n_labels != count:
        raise IdxLengthError(f"{count} images but {n_labels} labels")
    labels = np.frombuffer(raw_labels, dtype=np.uint8, count=n_labels, offset=8)

    images = pixels.reshape(count, 1, rows, cols).astype(np.float64) / 255.0
    log.info(f"  → loaded {count} MNIST images ({rows}x{cols}) from {images_path}")
    return LabeledSet(images, labels.astype(np.int64), num_classes=10, feature_domain=(0.0, 1.0))


def mnist_paths(split: str = "train", directory=None) -> tuple[Path, Path]:
    """Standard IDX file names under `directory` (default $MNIST_DIR), gzip variants accepted."""
    if split not in MNIST_FILES:
        raise SpecError(f"unknown MNIST split '{split}'")
    base = Path(directory or os.getenv("MNIST_DIR", "data/mnist"))
    found = []
    for name in MNIST_FILES[split]:
        plain, packed = base / name, base / f"{name}.gz"
        found.append(packed if not plain.exists() and packed.exists() else plain)
    return found[0], found[1]


# ── Batching and subsetting ───────────────────────────────────────────────────


class Batch(NamedTuple):
    indices: np.ndarray
    inputs: np.ndarray
    labels: np.ndarray


class BatchIter:
    """Yields one epoch of batches per iteration; each epoch is a fresh seeded permutation."""

    def __init__(self, data: LabeledSet, batch_size: int, shuffle_seed: int | None = None):
        if batch_size < 1:
            raise SpecError(f"batch_size must be >= 1, got {batch_size}")
        self.data = data
        self.batch_size = batch_size
        self.shuffle_seed = shuffle_seed
        self.epoch = 0

    def order(self, epoch: int) -> np.ndarray:
        n = len(self.data)
        if self.shuffle_seed is None:
            return np.arange(n)
        return make_rng(self.shuffle_seed, f"shuffle/{epoch}").permutation(n)

    def __len__(self) -> int:
        return -(-len(self.data) // self.batch_size)

    def __iter__(self) -> Iterator[Batch]:
        order = self.order(self.epoch)
        self.epoch += 1
        for start in range(0, order.shape[0], self.batch_size):
            idx = order[start : start + self.batch_size]
            yield Batch(idx, self.data.inputs[idx], self.data.labels[idx])


def batches(data: LabeledSet, batch_size: int, shuffle_seed: int | None = None) -> BatchIter:
    return BatchIter(data, batch_size, shuffle_seed)


def subset(data: LabeledSet, n: int, seed: int) -> LabeledSet:
    """Seeded class-stratified subsample without replacement.

    Each class receives n // K rows (the first n mod K classes one more);
    classes with too few rows give their shortfall to the others in order.
    """
    total = len(data)
    if n > total:
        raise InputError(f"subset of {n} requested from a set of {total}")
    if n < 0:
        raise InputError(f"subset size must be non-negative, got {n}")
    rng = make_rng(seed, "subset")
    if n == total:
        return data.take(rng.permutation(total))

    classes = np.flatnonzero(data.class_counts())
    available = data.class_counts()[classes]
    quota = np.full(classes.shape[0], n // classes.shape[0])
    quota[: n % classes.shape[0]] += 1
    quota = np.minimum(quota, available)
    spill = n - int(quota.sum())
    while spill > 0:
        for k in np.flatnonzero(quota < available):
            if spill == 0:
                break
            quota[k] += 1
            spill -= 1

    picked = [
        rng.choice(np.flatnonzero(data.labels == cls), size=int(q), replace=False)
        for cls, q in zip(classes, quota)
    ]
    idx = np.concatenate(picked) if picked else np.empty(0, dtype=np.int64)
    return data.take(rng.permutation(idx))
