"""Dataset ingestion and batching.

Reads the big-endian IDX image/label pairs MNIST-family datasets ship as,
and provides two seeded synthetic generators: Gaussian blobs (fast MLP
fixtures) and noisy prototype images (a desk-scale 10-class image stand-in
for when no IDX files are on disk). All pixel values live in [0, 1].
"""

from __future__ import annotations

import gzip
import struct
import zlib
from dataclasses import dataclass
from typing import Iterator, Optional

import numpy as np

from .tensor import Tensor

__all__ = [
    "Dataset",
    "IdxParseError",
    "load_idx",
    "synthetic_blobs",
    "synthetic_images",
    "batches",
    "take",
]

IDX_IMAGE_MAGIC = 0x00000803
IDX_LABEL_MAGIC = 0x00000801


class IdxParseError(ValueError):
    """Malformed IDX input (bad magic, truncation, or count mismatch)."""


@dataclass
class Dataset:
    """Images [N,C,H,W] scaled to [0,1] plus integer labels [N]."""

    images: Tensor
    labels: np.ndarray
    split: str = "train"

    def __post_init__(self):
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.images.shape[0] != self.labels.shape[0]:
            raise ValueError("image count does not match label count")

    def __len__(self) -> int:
        return self.labels.shape[0]

    @property
    def num_classes(self) -> int:
        return int(self.labels.max()) + 1 if len(self) else 0


def _open_maybe_gzip(path):
    return gzip.open(path, "rb") if str(path).endswith(".gz") else open(path, "rb")


def _read_be32(f, path) -> int:
    raw = f.read(4)
    if len(raw) != 4:
        raise IdxParseError(f"truncated IDX header in {path}")
    return struct.unpack(">I", raw)[0]


def load_idx(images_path, labels_path, split: str = "train") -> Dataset:
    """Parse an IDX image/label file pair.

    Image files carry magic 0x00000803 and dims [N, 28, 28]; label files
    magic 0x00000801 and dims [N]. Pixel bytes are scaled by 1/255.
    """
    with _open_maybe_gzip(images_path) as f:
        magic = _read_be32(f, images_path)
        if magic != IDX_IMAGE_MAGIC:
            raise IdxParseError(
                f"bad magic 0x{magic:08x} in {images_path}, expected 0x{IDX_IMAGE_MAGIC:08x}")
        n, rows, cols = (_read_be32(f, images_path) for _ in range(3))
        raw = f.read(n * rows * cols)
        if len(raw) != n * rows * cols:
            raise IdxParseError(f"truncated image data in {images_path}")
        pixels = np.frombuffer(raw, dtype=np.uint8).reshape(n, 1, rows, cols)
    with _open_maybe_gzip(labels_path) as f:
        magic = _read_be32(f, labels_path)
        if magic != IDX_LABEL_MAGIC:
            raise IdxParseError(
                f"bad magic 0x{magic:08x} in {labels_path}, expected 0x{IDX_LABEL_MAGIC:08x}")
        n_labels = _read_be32(f, labels_path)
        raw = f.read(n_labels)
        if len(raw) != n_labels:
            raise IdxParseError(f"truncated label data in {labels_path}")
        labels = np.frombuffer(raw, dtype=np.uint8).astype(np.int64)
    if n != n_labels:
        raise IdxParseError(
            f"count mismatch: {n} images vs {n_labels} labels")
    return Dataset(images=Tensor(pixels / 255.0), labels=labels, split=split)


def _split_rng(seed: int, split: str) -> np.random.Generator:
    # sample stream distinct per split; class structure stays on (seed, 0)
    code = zlib.crc32(split.encode())
    return np.random.default_rng(np.random.SeedSequence((seed, 1, code)))


def synthetic_blobs(classes: int, samples_per_class: int, dim: int,
                    spread: float, seed: int, split: str = "train") -> Dataset:
    """Gaussian clusters at seeded random centers, clipped to [0,1].

    Exactly ``samples_per_class`` per class; shape [N, 1, 1, dim]. The
    cluster centers depend only on ``seed``; the noise stream is keyed by
    (seed, split), so train/test splits share the class structure.
    """
    struct = np.random.default_rng(np.random.SeedSequence((seed, 0)))
    centers = struct.uniform(0.2, 0.8, size=(classes, dim))
    rng = _split_rng(seed, split)
    n = classes * samples_per_class
    labels = np.repeat(np.arange(classes), samples_per_class)
    points = centers[labels] + spread * rng.standard_normal((n, dim))
    points = np.clip(points, 0.0, 1.0).reshape(n, 1, 1, dim)
    return Dataset(images=Tensor(points), labels=labels, split=split)


def synthetic_images(classes: int, samples_per_class: int, seed: int,
                     noise: float = 0.12, max_shift: int = 2, size: int = 28,
                     background: float = 0.3, split: str = "train") -> Dataset:
    """Textured shapes over a flat gray background: a 10-class LeNet-scale
    image benchmark with controlled confusability.

    Classes come in pairs sharing a silhouette archetype and a texture
    family (orientation and frequency); within a pair only a small shape
    edit differs. Per-sample variation: texture phase, orientation jitter,
    brightness gain, cyclic shift up to ``max_shift``, and pixel noise.
    The background carries no class information, so sparsity pressure can
    silence responses to it without hurting accuracy.

    Class structure depends only on ``seed``; the sample stream is keyed
    by (seed, split), so train/test splits pose the same task with
    disjoint samples. Deterministic throughout.
    """
    struct = np.random.default_rng(np.random.SeedSequence((seed, 0)))
    yy, xx = np.mgrid[0:size, 0:size] / (size - 1)

    def ellipse(cy, cx, ry, rx):
        return (((yy - cy) / ry) ** 2 + ((xx - cx) / rx) ** 2 <= 1.0) * 1.0

    def rect(cy, cx, ry, rx):
        return ((np.abs(yy - cy) <= ry) & (np.abs(xx - cx) <= rx)) * 1.0

    def blob(lo, hi):
        cy, cx = struct.uniform(0.3, 0.7, size=2)
        ry, rx = struct.uniform(lo, hi, size=2)
        return ellipse(cy, cx, ry, rx) if struct.random() < 0.5 else rect(cy, cx, ry, rx)

    n_pairs = (classes + 1) // 2
    bases = [np.maximum(blob(0.15, 0.35), blob(0.15, 0.35)) for _ in range(n_pairs)]
    pair_freq = [struct.uniform(3.0, 8.0) for _ in range(n_pairs)]
    pair_theta = [struct.uniform(0, np.pi) for _ in range(n_pairs)]
    masks = []
    for c in range(classes):
        mask = bases[c // 2].copy()
        cy, cx = struct.uniform(0.25, 0.75, size=2)
        ry, rx = struct.uniform(0.05, 0.12, size=2)
        edit = ellipse(cy, cx, ry, rx)
        # add or carve: the small edit is all that separates a pair
        mask = np.maximum(mask, edit) if struct.random() < 0.5 \
            else np.clip(mask - edit, 0.0, 1.0)
        masks.append(mask)

    rng = _split_rng(seed, split)
    n = classes * samples_per_class
    labels = np.repeat(np.arange(classes), samples_per_class)
    imgs = np.empty((n, size, size))
    gains = rng.uniform(0.7, 1.1, size=n)
    phases = rng.uniform(0, 2 * np.pi, size=n)
    thetas = rng.normal(0.0, 0.3, size=n)
    shifts = rng.integers(-max_shift, max_shift + 1, size=(n, 2))
    for i in range(n):
        c = labels[i]
        p = c // 2
        th = pair_theta[p] + thetas[i]
        axis = np.cos(th) * xx + np.sin(th) * yy
        tex = 0.55 + 0.45 * np.sin(2 * np.pi * pair_freq[p] * axis + phases[i])
        obj = masks[c] * np.clip(tex, 0.0, 1.0) * gains[i]
        imgs[i] = np.roll(background + (1.0 - background) * obj,
                          tuple(shifts[i]), axis=(0, 1))
    imgs += rng.normal(0.0, noise, size=imgs.shape)
    imgs = np.clip(imgs, 0.0, 1.0).reshape(n, 1, size, size)
    return Dataset(images=Tensor(imgs), labels=labels, split=split)


def take(dataset: Dataset, n: int, seed: Optional[int] = 0) -> Dataset:
    """Seeded random subset of ``n`` samples (first n when seed is None)."""
    total = len(dataset)
    n = min(n, total)
    if seed is None:
        idx = np.arange(n)
    else:
        idx = np.random.default_rng(np.random.SeedSequence(seed)).permutation(total)[:n]
    return Dataset(images=Tensor(dataset.images.data[idx]),
                   labels=dataset.labels[idx], split=dataset.split)


def batches(dataset: Dataset, batch_size: int,
            shuffle_seed: Optional[int] = None) -> Iterator[tuple[Tensor, np.ndarray]]:
    """Yield (images, labels) batches; the final short batch is kept.

    ``shuffle_seed`` seeds a Fisher-Yates permutation of the sample order;
    None keeps dataset order.
    """
    if batch_size < 1:
        raise ValueError("batch_size must be positive")
    n = len(dataset)
    if shuffle_seed is None:
        order = np.arange(n)
    else:
        order = np.random.default_rng(
            np.random.SeedSequence(shuffle_seed)).permutation(n)
    images = dataset.images.data
    labels = dataset.labels
    for start in range(0, n, batch_size):
        idx = order[start:start + batch_size]
        yield Tensor(images[idx]), labels[idx]
