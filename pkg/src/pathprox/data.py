"""Datasets: IDX (MNIST format) I/O, subsampling, splits, normalization, synthetic 2D data."""
from __future__ import annotations

import struct
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Iterator

import numpy as np

from .errors import ConfigError, FormatError

IMAGES_MAGIC = 0x00000803
LABELS_MAGIC = 0x00000801


@dataclass(frozen=True)
class Dataset:
    features: np.ndarray
    labels: np.ndarray
    n_classes: int
    provenance: str = ""

    def __post_init__(self):
        if len(self.labels) != len(self.features):
            raise ValueError(f"{len(self.labels)} labels for {len(self.features)} samples")
        if len(self.labels) and (self.labels.min() < 0 or self.labels.max() >= self.n_classes):
            raise ValueError(f"labels outside [0, {self.n_classes})")

    def __len__(self) -> int:
        return len(self.labels)

    def subset(self, idx, tag: str = "") -> "Dataset":
        idx = np.asarray(idx, dtype=np.int64)
        prov = f"{self.provenance}|{tag}" if tag else self.provenance
        return Dataset(self.features[idx], self.labels[idx], self.n_classes, prov)

    def flat(self) -> "Dataset":
        return replace(self, features=self.features.reshape(len(self), -1))


# ---------------------------------------------------------------------------
# IDX
# ---------------------------------------------------------------------------


def _read_idx(path, magic: int, ndim: int) -> np.ndarray:
    raw = Path(path).read_bytes()
    header = 4 + 4 * ndim
    if len(raw) < 4:
        raise FormatError(f"{path}: file too short for an IDX magic number", len(raw))
    got = struct.unpack(">I", raw[:4])[0]
    if got != magic:
        raise FormatError(f"{path}: magic 0x{got:08x}, expected 0x{magic:08x}", 0)
    if len(raw) < header:
        raise FormatError(f"{path}: truncated IDX header", len(raw))
    dims = struct.unpack(">" + "I" * ndim, raw[4:header])
    need = header + int(np.prod(dims))
    if len(raw) < need:
        raise FormatError(f"{path}: truncated data, expected {need} bytes, found {len(raw)}", len(raw))
    if len(raw) > need:
        raise FormatError(f"{path}: {len(raw) - need} trailing bytes after IDX payload", need)
    return np.frombuffer(raw, dtype=np.uint8, offset=header).reshape(dims)


def load_idx(images_path, labels_path, n_classes: int = 10) -> Dataset:
    """Read an image/label IDX pair; pixels are scaled to ``[0, 1]``."""
    images = _read_idx(images_path, IMAGES_MAGIC, 3)
    labels = _read_idx(labels_path, LABELS_MAGIC, 1)
    if len(labels) == 0:
        raise FormatError(f"{labels_path}: label file is empty", 8)
    if len(images) != len(labels):
        raise FormatError(f"{len(images)} images but {len(labels)} labels", 4)
    if labels.max() >= n_classes:
        raise FormatError(f"{labels_path}: label {labels.max()} >= n_classes={n_classes}", 8)
    return Dataset(images.astype(np.float64) / 255.0, labels.astype(np.int64), n_classes, f"idx:{images_path}")


def write_idx(ds: Dataset, images_path, labels_path) -> None:
    """Inverse of :func:`load_idx` for features on the ``k / 255`` grid."""
    feats = np.asarray(ds.features)
    if feats.ndim != 3:
        raise ValueError(f"IDX images need (N, rows, cols) features, got {feats.shape}")
    pixels = np.rint(feats * 255.0)
    if pixels.min() < 0 or pixels.max() > 255:
        raise ValueError("features must lie in [0, 1] to be written as IDX bytes")
    n, rows, cols = feats.shape
    Path(images_path).write_bytes(struct.pack(">IIII", IMAGES_MAGIC, n, rows, cols) + pixels.astype(np.uint8).tobytes())
    Path(labels_path).write_bytes(struct.pack(">II", LABELS_MAGIC, n) + np.asarray(ds.labels, dtype=np.uint8).tobytes())


def load_mnist(directory, split: str = "train") -> Dataset:
    prefix = "train" if split == "train" else "t10k"
    d = Path(directory)
    return load_idx(d / f"{prefix}-images-idx3-ubyte", d / f"{prefix}-labels-idx1-ubyte")


def digits_as_mnist(seed: int = 0) -> tuple[Dataset, Dataset]:
    """MNIST-shaped stand-in built from scikit-learn's bundled 8x8 digits.

    Each digit is bilinearly upsampled to 20x20 and centred on a 28x28
    canvas, then quantized to bytes. Returns ``(train, test)`` with a
    seeded 80/20 split.
    """
    from scipy.ndimage import zoom
    from sklearn.datasets import load_digits

    raw = load_digits()
    imgs = raw.images / 16.0
    canvas = np.zeros((len(imgs), 28, 28))
    for k, img in enumerate(imgs):
        canvas[k, 4:24, 4:24] = np.clip(zoom(img, 2.5, order=1), 0.0, 1.0)
    canvas = np.rint(canvas * 255.0) / 255.0
    full = Dataset(canvas, raw.target.astype(np.int64), 10, "sklearn-digits@28x28")
    test_size = len(full) // 5
    train, test = train_val_split(full, test_size, seed)
    return train, test


# ---------------------------------------------------------------------------
# sampling
# ---------------------------------------------------------------------------


def subsample_per_class(ds: Dataset, per_class: int, seed: int) -> Dataset:
    """Exactly ``per_class`` samples of every class, ordered by (class, draw)."""
    rng = np.random.default_rng(seed)
    picks = []
    for c in range(ds.n_classes):
        idx = np.flatnonzero(ds.labels == c)
        if len(idx) < per_class:
            raise ConfigError(f"class {c} has {len(idx)} samples, {per_class} requested")
        picks.append(rng.choice(idx, size=per_class, replace=False))
    return ds.subset(np.concatenate(picks), f"per_class={per_class},seed={seed}")


def train_val_split(ds: Dataset, val_size: int, seed: int) -> tuple[Dataset, Dataset]:
    if not 0 <= val_size < len(ds):
        raise ConfigError(f"val_size must be in [0, {len(ds)}), got {val_size}")
    perm = np.random.default_rng(seed).permutation(len(ds))
    return ds.subset(np.sort(perm[val_size:]), "train"), ds.subset(np.sort(perm[:val_size]), "val")


@dataclass(frozen=True)
class Normalizer:
    mean: float
    std: float

    @classmethod
    def fit(cls, ds: Dataset) -> "Normalizer":
        std = float(ds.features.std())
        return cls(float(ds.features.mean()), std if std > 0 else 1.0)

    def __call__(self, ds: Dataset) -> Dataset:
        return replace(ds, features=(ds.features - self.mean) / self.std)


def synthetic_two_class(n: int, noise: float, outlier_fraction: float, seed: int) -> Dataset:
    """Two 2D Gaussian blobs at ``(-1, 0)`` (class 0) and ``(+1, 0)`` (class 1).

    A seeded ``outlier_fraction`` of the points is mirrored across the
    vertical midline, keeping its label.
    """
    if n < 2:
        raise ConfigError("synthetic_two_class needs n >= 2")
    rng = np.random.default_rng(seed)
    labels = np.arange(n) % 2
    centres = np.where(labels[:, None] == 0, [-1.0, 0.0], [1.0, 0.0])
    x = centres + noise * rng.normal(size=(n, 2))
    n_out = int(round(outlier_fraction * n))
    if n_out:
        flip = rng.choice(n, size=n_out, replace=False)
        x[flip, 0] *= -1.0
    return Dataset(x, labels.astype(np.int64), 2, f"synthetic(n={n},noise={noise},out={outlier_fraction},seed={seed})")


def epoch_order(n: int, seed: int, epoch: int) -> np.ndarray:
    return np.random.default_rng([seed, epoch]).permutation(n)


def batch_iterator(ds: Dataset, batch_size: int, seed: int, epoch: int) -> Iterator[tuple[np.ndarray, np.ndarray]]:
    """Seeded per-epoch shuffle; the last partial batch is kept. ``batch_size >= N`` is full batch."""
    if batch_size < 1:
        raise ConfigError("batch_size must be >= 1")
    n = len(ds)
    if batch_size >= n:
        yield ds.features, ds.labels
        return
    order = epoch_order(n, seed, epoch)
    for start in range(0, n, batch_size):
        idx = order[start:start + batch_size]
        yield ds.features[idx], ds.labels[idx]
