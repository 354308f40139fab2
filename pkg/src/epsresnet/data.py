"""Dataset loading, augmentation, and deterministic batching.

CIFAR-10 ships as binary batches of 3073-byte records: one label byte
followed by 3072 pixel bytes (row-major R, G, B planes). The same format is
used for the synthetic corpora the tests generate, so the parsing path is
exercised either way.

Every random decision is derived from (seed, epoch, batch index) through a
SeedSequence, so batch contents do not depend on iteration order and a run
can resume mid-training without desynchronizing.
"""

from __future__ import annotations

import os
from dataclasses import dataclass
from typing import Iterator

import numpy as np

from .errors import ConfigError, EpsResNetError

CIFAR_CLASSES = 10
_RECORD = 3073
_TRAIN_FILES = [f"data_batch_{i}.bin" for i in range(1, 6)]
_TEST_FILE = "test_batch.bin"


class DataError(EpsResNetError):
    """A dataset file is malformed."""


@dataclass
class Dataset:
    images: np.ndarray        # (N, 3, 32, 32) float32, normalized
    labels: np.ndarray        # (N,) int64
    mean: np.ndarray          # per-channel normalization constants
    std: np.ndarray
    classes: int = CIFAR_CLASSES

    def __len__(self) -> int:
        return len(self.labels)

    def subset(self, n: int) -> "Dataset":
        return Dataset(self.images[:n], self.labels[:n], self.mean, self.std, self.classes)


@dataclass
class AugmentConfig:
    pad: int = 4
    crop: int = 32
    hflip_prob: float = 0.5

    def __post_init__(self):
        if self.crop > 32 + 2 * self.pad:
            raise ConfigError("crop size exceeds padded image")


def _parse_batch_file(path: str, limit: int | None = None) -> tuple[np.ndarray, np.ndarray]:
    raw = np.fromfile(path, dtype=np.uint8)
    if raw.size % _RECORD != 0:
        raise DataError(f"{path}: truncated at record index {raw.size // _RECORD} "
                        f"({raw.size % _RECORD} stray bytes)")
    records = raw.reshape(-1, _RECORD)
    if limit is not None:
        records = records[:limit]
    labels = records[:, 0].astype(np.int64)
    bad = np.nonzero(labels >= CIFAR_CLASSES)[0]
    if bad.size:
        raise DataError(f"{path}: label byte {labels[bad[0]]} >= {CIFAR_CLASSES} "
                        f"at record index {int(bad[0])}")
    images = records[:, 1:].reshape(-1, 3, 32, 32)
    return images, labels


def compute_normalization(images_u8: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Per-channel mean/std of pixel values scaled to [0, 1]."""
    x = images_u8.astype(np.float64) / 255.0
    mean = x.mean(axis=(0, 2, 3))
    std = x.std(axis=(0, 2, 3))
    std[std == 0] = 1.0
    return mean.astype(np.float32), std.astype(np.float32)


def normalize(images_u8: np.ndarray, mean: np.ndarray, std: np.ndarray) -> np.ndarray:
    x = images_u8.astype(np.float32) / np.float32(255.0)
    return (x - mean[:, None, None]) / std[:, None, None]


def denormalize(images: np.ndarray, mean: np.ndarray, std: np.ndarray) -> np.ndarray:
    return (images * std[:, None, None] + mean[:, None, None]) * np.float32(255.0)


def load_cifar10(directory: str, train_limit: int | None = None,
                 test_limit: int | None = None,
                 mean: np.ndarray | None = None,
                 std: np.ndarray | None = None) -> tuple[Dataset, Dataset]:
    """Parse the standard binary batches into normalized train/test sets.

    Normalization constants default to statistics of the loaded training
    images; pass `mean`/`std` to reuse constants from a checkpoint.
    """
    train_imgs, train_labels = [], []
    remaining = train_limit
    for fname in _TRAIN_FILES:
        path = os.path.join(directory, fname)
        if not os.path.exists(path):
            raise DataError(f"missing dataset file {path}")
        if remaining == 0:
            break
        imgs, labels = _parse_batch_file(path, remaining)
        train_imgs.append(imgs)
        train_labels.append(labels)
        if remaining is not None:
            remaining -= len(labels)
    images_u8 = np.concatenate(train_imgs)
    labels = np.concatenate(train_labels)
    test_u8, test_labels = _parse_batch_file(os.path.join(directory, _TEST_FILE), test_limit)
    if mean is None or std is None:
        mean, std = compute_normalization(images_u8)
    train = Dataset(normalize(images_u8, mean, std), labels, mean, std)
    test = Dataset(normalize(test_u8, mean, std), test_labels, mean, std)
    return train, test


def write_cifar_binary(path: str, images_u8: np.ndarray, labels: np.ndarray) -> None:
    """Write records in the standard binary layout."""
    n = len(labels)
    records = np.empty((n, _RECORD), dtype=np.uint8)
    records[:, 0] = labels
    records[:, 1:] = images_u8.reshape(n, 3072)
    records.tofile(path)


# --- augmentation -----------------------------------------------------------

def augment(images: np.ndarray, cfg: AugmentConfig,
            rng: np.random.Generator) -> np.ndarray:
    """Zero-pad, random-crop, random horizontal flip; labels untouched.

    Padding happens after normalization, so the fill value 0 is the dataset
    mean. Offsets are drawn first, then flips, one value per sample.
    """
    b, c, h, w = images.shape
    p = cfg.pad
    span = h + 2 * p - cfg.crop
    offsets = rng.integers(0, span + 1, size=(b, 2))
    flips = rng.random(b) < cfg.hflip_prob
    padded = np.zeros((b, c, h + 2 * p, w + 2 * p), dtype=images.dtype)
    padded[:, :, p:p + h, p:p + w] = images
    out = np.empty((b, c, cfg.crop, cfg.crop), dtype=images.dtype)
    for i in range(b):
        dy, dx = offsets[i]
        crop = padded[i, :, dy:dy + cfg.crop, dx:dx + cfg.crop]
        out[i] = crop[:, :, ::-1] if flips[i] else crop
    return out


def batch_rng(seed: int, epoch: int, batch_index: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([seed, epoch, batch_index]))


def iter_batches(dataset: Dataset, batch_size: int, seed: int, epoch: int,
                 augment_cfg: AugmentConfig | None = None,
                 drop_tiny: bool = True) -> Iterator[tuple[np.ndarray, np.ndarray]]:
    """Shuffled mini-batches; order is a pure function of (seed, epoch).

    A trailing batch of fewer than 2 samples is dropped when `drop_tiny`
    (train-mode batch normalization cannot use it).
    """
    order = np.random.default_rng(
        np.random.SeedSequence([seed, epoch])).permutation(len(dataset))
    for bi, start in enumerate(range(0, len(order), batch_size)):
        idx = order[start:start + batch_size]
        if drop_tiny and len(idx) < 2:
            continue
        images = dataset.images[idx]
        labels = dataset.labels[idx]
        if augment_cfg is not None:
            images = augment(images, augment_cfg, batch_rng(seed, epoch, bi))
        yield images, labels


# --- synthetic corpora ------------------------------------------------------

def synthetic_images(kind: str, n: int, seed: int,
                     classes: int = CIFAR_CLASSES) -> tuple[np.ndarray, np.ndarray]:
    """Reproducible labeled uint8 images: class templates plus pixel noise.

    kinds: 'separable' (strong class-mean patterns, linearly separable on
    raw pixels by construction), 'xor' (two latent sign factors, label is
    their product, 2 classes), 'random' (noise images, random labels).
    """
    if n < 2:
        raise ConfigError("synthetic datasets need n >= 2")
    rng = np.random.default_rng(np.random.SeedSequence([seed, 91]))
    if kind == "separable":
        templates = rng.normal(0.0, 1.0, (classes, 3, 32, 32))
        labels = rng.permutation(np.arange(n) % classes).astype(np.int64)
        pixels = 128.0 + 45.0 * templates[labels] + 15.0 * rng.normal(0.0, 1.0, (n, 3, 32, 32))
    elif kind == "xor":
        classes = 2
        u = rng.normal(0.0, 1.0, (3, 32, 32))
        v = rng.normal(0.0, 1.0, (3, 32, 32))
        s1 = rng.integers(0, 2, n) * 2 - 1
        s2 = rng.integers(0, 2, n) * 2 - 1
        labels = ((s1 * s2) > 0).astype(np.int64)
        pixels = (128.0 + 30.0 * (s1[:, None, None, None] * u + s2[:, None, None, None] * v)
                  + 15.0 * rng.normal(0.0, 1.0, (n, 3, 32, 32)))
    elif kind == "random":
        labels = rng.integers(0, classes, n).astype(np.int64)
        pixels = 128.0 + 40.0 * rng.normal(0.0, 1.0, (n, 3, 32, 32))
    else:
        raise ConfigError(f"unknown synthetic dataset kind {kind!r}")
    return np.clip(pixels, 0, 255).astype(np.uint8), labels


def synthetic_dataset(kind: str, n: int, seed: int,
                      classes: int = CIFAR_CLASSES) -> Dataset:
    images_u8, labels = synthetic_images(kind, n, seed, classes)
    mean, std = compute_normalization(images_u8)
    k = 2 if kind == "xor" else classes
    return Dataset(normalize(images_u8, mean, std), labels, mean, std, classes=k)
