"""Dataset ingestion: synthetic clustered images and the CIFAR-10 binaries.

The synthetic generator makes each class a fixed low-frequency random
pattern (blurred white noise) so random resized crops preserve class
identity; samples are the pattern plus iid Gaussian pixel noise, clamped to
[0, 1]. Labels are consumed only by evaluation and analysis, never by the
training losses.
"""

from __future__ import annotations

import os
from dataclasses import dataclass

import numpy as np

from .augment import _convolve1d_reflect, _gaussian_kernel
from .errors import LabelRangeError, ParameterError, RecordLengthError
from .rng import RngKey

CIFAR_TRAIN_FILES = [f"data_batch_{i}.bin" for i in range(1, 6)]
CIFAR_TEST_FILES = ["test_batch.bin"]
CIFAR_RECORD_BYTES = 3073  # 1 label byte + 3 x 1024 channel planes


@dataclass
class LabeledImageDataset:
    images: np.ndarray          # (M, C, H, W) float32 in [0, 1]
    labels: np.ndarray          # (M,) int64 in [0, class_count)
    class_count: int

    def __post_init__(self):
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.images.shape[0] != self.labels.shape[0]:
            raise ParameterError(
                f"images/labels length mismatch: {self.images.shape[0]} vs "
                f"{self.labels.shape[0]}"
            )

    def __len__(self) -> int:
        return self.images.shape[0]

    @property
    def image_shape(self) -> tuple[int, int, int]:
        return self.images.shape[1:]


def _smooth_field(rng: np.random.Generator, channels: int, h: int, w: int,
                  sigma: float) -> np.ndarray:
    field = rng.standard_normal((channels, h, w))
    size = int(2 * np.ceil(2 * sigma) + 1)
    kernel = _gaussian_kernel(size, sigma, np.float64)
    field = _convolve1d_reflect(field, kernel, axis=1)
    field = _convolve1d_reflect(field, kernel, axis=2)
    std = field.std()
    return field / (std if std > 0 else 1.0)


def synth_clusters(class_count: int, per_class: int, size: tuple[int, int],
                   noise_sigma: float, seed: int, channels: int = 3,
                   pattern_contrast: float = 0.2,
                   pattern_seed: int | None = None,
                   sample_stream: str = "samples") -> LabeledImageDataset:
    """Clustered images: one smooth base pattern per class plus pixel noise.

    `pattern_seed` pins the class patterns independently of the sample noise
    so train/test splits (distinct `sample_stream` names) share classes; it
    defaults to `seed`.
    """
    if class_count < 2:
        raise ParameterError(f"need at least 2 classes, got {class_count}")
    h, w = size
    pkey = RngKey(pattern_seed if pattern_seed is not None else seed)
    patterns = np.stack([
        0.5 + pattern_contrast
        * _smooth_field(pkey.child("pattern", c).generator(), channels, h, w,
                        sigma=max(h, w) / 5.0)
        for c in range(class_count)
    ])
    patterns = np.clip(patterns, 0.05, 0.95)

    skey = RngKey(seed)
    images = np.empty((class_count * per_class, channels, h, w), dtype=np.float32)
    labels = np.empty(class_count * per_class, dtype=np.int64)
    for c in range(class_count):
        noise = skey.child("noise", sample_stream, c).generator().standard_normal(
            (per_class, channels, h, w))
        block = np.clip(patterns[c][None] + noise_sigma * noise, 0.0, 1.0)
        images[c * per_class:(c + 1) * per_class] = block.astype(np.float32)
        labels[c * per_class:(c + 1) * per_class] = c
    return LabeledImageDataset(images=images, labels=labels, class_count=class_count)


def _read_cifar_file(path: str) -> tuple[np.ndarray, np.ndarray]:
    if not os.path.isfile(path):
        raise FileNotFoundError(f"CIFAR-10 batch file missing: {path}")
    raw = np.fromfile(path, dtype=np.uint8)
    if raw.size == 0 or raw.size % CIFAR_RECORD_BYTES != 0:
        raise RecordLengthError(
            f"{path}: {raw.size} bytes is not a multiple of "
            f"{CIFAR_RECORD_BYTES}-byte records"
        )
    records = raw.reshape(-1, CIFAR_RECORD_BYTES)
    labels = records[:, 0].astype(np.int64)
    if labels.max(initial=0) > 9:
        bad = int(labels.max())
        raise LabelRangeError(f"{path}: label {bad} outside [0, 9]")
    images = records[:, 1:].reshape(-1, 3, 32, 32).astype(np.float32) / 255.0
    return images, labels


def load_cifar10(directory: str, split: str) -> LabeledImageDataset:
    """Load the standard CIFAR-10 binary batches from `directory`.

    Accepts either the directory containing the .bin files or its parent
    holding `cifar-10-batches-bin/`.
    """
    if split not in ("train", "test"):
        raise ParameterError(f"split must be 'train' or 'test', got '{split}'")
    nested = os.path.join(directory, "cifar-10-batches-bin")
    if os.path.isdir(nested):
        directory = nested
    files = CIFAR_TRAIN_FILES if split == "train" else CIFAR_TEST_FILES
    parts = [_read_cifar_file(os.path.join(directory, f)) for f in files]
    images = np.concatenate([p[0] for p in parts])
    labels = np.concatenate([p[1] for p in parts])
    return LabeledImageDataset(images=images, labels=labels, class_count=10)


def stratified_subset(dataset: LabeledImageDataset, total: int,
                      seed: int) -> LabeledImageDataset:
    """First total/classes indices of a per-class seeded permutation."""
    if total <= 0 or total > len(dataset):
        raise ParameterError(f"subset size {total} outside (0, {len(dataset)}]")
    per = total // dataset.class_count
    picks = []
    for c in range(dataset.class_count):
        idx = np.flatnonzero(dataset.labels == c)
        order = RngKey(seed).child("subset", c).generator().permutation(idx.size)
        picks.append(idx[order[:per]])
    sel = np.concatenate(picks)
    return LabeledImageDataset(images=dataset.images[sel],
                               labels=dataset.labels[sel],
                               class_count=dataset.class_count)


def shuffle_permutation(count: int, key: RngKey) -> np.ndarray:
    return key.generator().permutation(count)


def batches(dataset: LabeledImageDataset, n: int, epoch_key: RngKey):
    """Yield (images, labels) for each of the floor(M/N) full shuffled batches."""
    if n < 1:
        raise ParameterError(f"batch size must be >= 1, got {n}")
    perm = shuffle_permutation(len(dataset), epoch_key)
    full = (len(dataset) // n) * n
    for start in range(0, full, n):
        idx = perm[start:start + n]
        yield dataset.images[idx], dataset.labels[idx]
