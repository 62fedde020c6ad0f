"""Evaluation protocols over frozen backbone features.

Both evaluators consume a FeatureBank: unit-norm backbone features (the
projector is discarded) plus labels. KNN votes with exp(sim/0.07) weights
over the top K cosine neighbors; the linear probe fits one affine layer by
SGD with a cosine-decayed learning rate on the frozen features.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import numcore as nc
from .data import LabeledImageDataset
from .errors import ParameterError, ShapeError
from .rng import RngKey
from .trainer import normalize_images


@dataclass
class FeatureBank:
    features: np.ndarray        # (M, featDim), unit-norm rows
    labels: np.ndarray          # (M,)

    def __post_init__(self):
        if self.features.ndim != 2 or self.features.shape[0] != self.labels.shape[0]:
            raise ShapeError(
                f"feature bank {self.features.shape} vs labels {self.labels.shape}"
            )

    def __len__(self) -> int:
        return self.features.shape[0]


def extract_features(backbone_net, dataset: LabeledImageDataset,
                     norm_mean: np.ndarray | None = None,
                     norm_std: np.ndarray | None = None,
                     batch_size: int = 256) -> FeatureBank:
    """Deterministic, augmentation-free backbone features, row-normalized.

    `backbone_net` is anything with a `backbone_features(images)` method
    (a Network); normalization stats default to the dataset's own.
    """
    if norm_mean is None or norm_std is None:
        norm_mean = dataset.images.mean(axis=(0, 2, 3)).astype(np.float64)
        norm_std = np.maximum(dataset.images.std(axis=(0, 2, 3)), 1e-6).astype(np.float64)
    chunks = []
    dtype = getattr(backbone_net, "dtype", np.float32)
    for start in range(0, len(dataset), batch_size):
        x = normalize_images(dataset.images[start:start + batch_size],
                             norm_mean, norm_std, dtype)
        feats = backbone_net.backbone_features(x).value
        chunks.append(feats)
    features = np.concatenate(chunks) if chunks else np.zeros((0, 0))
    norms = np.maximum(np.linalg.norm(features, axis=1, keepdims=True), 1e-12)
    return FeatureBank(features=features / norms, labels=dataset.labels.copy())


def knn_evaluate(train: FeatureBank, test: FeatureBank, k: int = 200,
                 vote_temperature: float = 0.07, weighted: bool = True,
                 class_count: int | None = None) -> float:
    """Similarity-weighted K-nearest-neighbor accuracy on the test bank."""
    if len(train) == 0 or len(test) == 0:
        raise ParameterError("knn_evaluate: empty feature bank")
    if k < 1 or k > len(train):
        raise ParameterError(f"knn_evaluate: k={k} outside [1, {len(train)}]")
    if class_count is None:
        class_count = int(train.labels.max()) + 1
    sims = test.features @ train.features.T          # (T, M) cosine
    if k < len(train):
        top = np.argpartition(-sims, k - 1, axis=1)[:, :k]
    else:
        top = np.broadcast_to(np.arange(len(train)), (len(test), len(train))).copy()
    rows = np.arange(len(test))[:, None]
    top_sims = sims[rows, top]
    top_labels = train.labels[top]
    if weighted:
        w = np.exp(top_sims / vote_temperature)
    else:
        w = np.ones_like(top_sims)
    scores = np.zeros((len(test), class_count))
    for c in range(class_count):
        scores[:, c] = np.where(top_labels == c, w, 0.0).sum(axis=1)
    pred = scores.argmax(axis=1)      # argmax takes the smallest class id on ties
    return float((pred == test.labels).mean())


def linear_probe(train: FeatureBank, test: FeatureBank, class_count: int,
                 epochs: int = 100, lr: float = 1.0, momentum: float = 0.9,
                 weight_decay: float = 0.0, batch_size: int = 256,
                 seed: int = 0) -> float:
    """Fit one affine layer with softmax cross-entropy on frozen features."""
    if class_count < 2:
        raise ParameterError(f"linear_probe: degenerate class_count {class_count}")
    x = train.features.astype(np.float64)
    y = train.labels
    m, d = x.shape
    w = np.zeros((d, class_count))
    b = np.zeros(class_count)
    vw = np.zeros_like(w)
    vb = np.zeros_like(b)
    onehot = np.eye(class_count)[y]
    total_steps = max(1, epochs * max(1, m // batch_size))
    step = 0
    for epoch in range(epochs):
        perm = RngKey(seed).child("probe", epoch).generator().permutation(m)
        for start in range(0, m - batch_size + 1, batch_size):
            idx = perm[start:start + batch_size]
            xb, tb = x[idx], onehot[idx]
            logits = xb @ w + b
            p = nc.softmax_rows_array(logits, 1.0)
            gl = (p - tb) / xb.shape[0]
            gw = xb.T @ gl + weight_decay * w
            gb = gl.sum(axis=0)
            cur_lr = lr * 0.5 * (1.0 + math.cos(math.pi * step / total_steps))
            vw = momentum * vw + gw
            vb = momentum * vb + gb
            w -= cur_lr * vw
            b -= cur_lr * vb
            step += 1
    pred = (test.features @ w + b).argmax(axis=1)
    return float((pred == test.labels).mean())


def evaluation_report(method: str, dataset_name: str, mode: str, accuracy: float,
                      k: int | None, class_count: int, train_size: int,
                      test_size: int) -> dict:
    return {
        "method": method,
        "dataset": dataset_name,
        "mode": mode,
        "K": k,
        "accuracy": accuracy,
        "class_count": class_count,
        "train_size": train_size,
        "test_size": test_size,
    }
