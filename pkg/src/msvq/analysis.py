"""False-negative identification analysis and embedding export.

A false negative is a queued sample whose true class matches the positive's
class. For each teacher soft label we rank the queue by probability, take
the top k entries, and count label matches; "all" is the per-positive union
of the three sets, where hits from the two queues count as distinct
negatives (they come from different teachers and different past batches).
"""

from __future__ import annotations

import csv
from dataclasses import dataclass

import numpy as np

from . import augment
from . import numcore as nc
from .data import LabeledImageDataset, batches
from .errors import ParameterError, ShapeError
from .evalkit import FeatureBank
from .memory import NegativeQueue
from .relation import RelationDistribution
from .rng import RngKey
from .trainer import TrainState, normalize_images, _embed_untracked


@dataclass
class SoftLabelSnapshot:
    """One batch worth of teacher distributions plus the labels they index."""

    p21: np.ndarray             # (N, Q) over queue 1
    p31: np.ndarray             # (N, Q) over queue 1
    p42: np.ndarray             # (N, Q) over queue 2
    queue1_labels: np.ndarray   # (Q,)
    queue2_labels: np.ndarray   # (Q,)
    positive_labels: np.ndarray  # (N,)

    def __post_init__(self):
        n = self.positive_labels.shape[0]
        for name, p, q in (("p21", self.p21, self.queue1_labels),
                           ("p31", self.p31, self.queue1_labels),
                           ("p42", self.p42, self.queue2_labels)):
            if p.shape != (n, q.shape[0]):
                raise ShapeError(
                    f"{name} has shape {p.shape}, expected ({n}, {q.shape[0]})"
                )


def _topk_indices(probs: np.ndarray, k: int) -> np.ndarray:
    """Top-k column indices per row, descending, earlier index wins ties."""
    order = np.argsort(-probs, axis=1, kind="stable")
    return order[:, :k]


def false_negatives_topk(p: RelationDistribution | np.ndarray,
                         queue_labels: np.ndarray,
                         positive_labels: np.ndarray, k: int = 5) -> float:
    """Mean count of same-class queue entries in each row's top k."""
    probs = p.probs if isinstance(p, RelationDistribution) else np.asarray(p)
    queue_labels = np.asarray(queue_labels)
    positive_labels = np.asarray(positive_labels)
    if probs.shape[1] != queue_labels.shape[0]:
        raise ShapeError(
            f"{probs.shape[1]} queue columns vs {queue_labels.shape[0]} labels"
        )
    if probs.shape[0] != positive_labels.shape[0]:
        raise ShapeError(
            f"{probs.shape[0]} rows vs {positive_labels.shape[0]} positives"
        )
    if k > probs.shape[1]:
        raise ParameterError(f"k={k} exceeds queue size {probs.shape[1]}")
    if k == 0:
        return 0.0
    top = _topk_indices(probs, k)
    matches = queue_labels[top] == positive_labels[:, None]
    return float(matches.sum(axis=1).mean())


def false_negatives_union(snapshot: SoftLabelSnapshot, k: int = 5) -> float:
    """Mean number of distinct false negatives over the three soft labels.

    The two queue-1 sets are unioned by queue index; queue-2 hits are
    distinct negatives by construction and add their own count.
    """
    if k == 0:
        return 0.0
    n = snapshot.positive_labels.shape[0]
    pos = snapshot.positive_labels
    top21 = _topk_indices(snapshot.p21, k)
    top31 = _topk_indices(snapshot.p31, k)
    top42 = _topk_indices(snapshot.p42, k)
    counts = np.empty(n)
    for i in range(n):
        fn21 = set(top21[i][snapshot.queue1_labels[top21[i]] == pos[i]].tolist())
        fn31 = set(top31[i][snapshot.queue1_labels[top31[i]] == pos[i]].tolist())
        fn42 = set(top42[i][snapshot.queue2_labels[top42[i]] == pos[i]].tolist())
        counts[i] = len(fn21 | fn31) + len(fn42)
    return float(counts.mean())


def false_negative_report(state: TrainState, dataset: LabeledImageDataset,
                          k: int = 5, seed_label: str = "analysis") -> dict:
    """Replay one labeled pass and report mean top-k false-negative counts.

    Fresh labeled queues are cycled full once before counting, so every
    measured batch sees fully labeled negatives. Teacher weights come from
    the checkpointed state and are not modified.
    """
    cfg = state.config
    key = RngKey(cfg.seed).child(seed_label)
    q = cfg.queue_size
    dim = cfg.encoder.embed_dim
    queue1 = NegativeQueue(q, dim, key.child("queue", 1).generator(),
                           dtype=cfg.dtype, with_labels=True)
    queue2 = NegativeQueue(q, dim, key.child("queue", 2).generator(),
                           dtype=cfg.dtype, with_labels=True)
    weak = augment.weak_policy(cfg.encoder.image_size)
    fill_batches = -(-q // cfg.batch_size)  # ceil: batches to cycle a queue

    sums = {"p21": 0.0, "p31": 0.0, "p42": 0.0, "all": 0.0}
    measured = 0
    for bidx, (images, labels) in enumerate(
            batches(dataset, cfg.batch_size, key.child("shuffle"))):
        akey = key.child("augment", bidx)
        x2 = normalize_images(augment.apply_policy(images, weak, akey.child(2)),
                              state.norm_mean, state.norm_std, cfg.dtype)
        x3 = normalize_images(augment.apply_policy(images, weak, akey.child(3)),
                              state.norm_mean, state.norm_std, cfg.dtype)
        x4 = normalize_images(augment.apply_policy(images, weak, akey.child(4)),
                              state.norm_mean, state.norm_std, cfg.dtype)
        z2 = _embed_untracked(state.tri.teacher1, x2)
        z3 = _embed_untracked(state.tri.teacher1, x3)
        z4 = _embed_untracked(state.tri.teacher2, x4)
        if bidx >= fill_batches:
            snapshot = SoftLabelSnapshot(
                p21=nc.softmax_rows_array(z2 @ queue1.as_matrix(), cfg.tau_t),
                p31=nc.softmax_rows_array(z3 @ queue1.as_matrix(), cfg.tau_t),
                p42=nc.softmax_rows_array(z4 @ queue2.as_matrix(), cfg.tau_t),
                queue1_labels=queue1.labels_snapshot(),
                queue2_labels=queue2.labels_snapshot(),
                positive_labels=labels,
            )
            sums["p21"] += false_negatives_topk(snapshot.p21, snapshot.queue1_labels,
                                                labels, k)
            sums["p31"] += false_negatives_topk(snapshot.p31, snapshot.queue1_labels,
                                                labels, k)
            sums["p42"] += false_negatives_topk(snapshot.p42, snapshot.queue2_labels,
                                                labels, k)
            sums["all"] += false_negatives_union(snapshot, k)
            measured += 1
        queue1.enqueue_dequeue(z2, labels)
        queue2.enqueue_dequeue(z4, labels)
    if measured == 0:
        raise ParameterError(
            "dataset too small to measure: every batch was needed to fill the queues"
        )
    return {
        "step": state.step,
        f"fn_top{k}_P21": sums["p21"] / measured,
        f"fn_top{k}_P31": sums["p31"] / measured,
        f"fn_top{k}_P42": sums["p42"] / measured,
        f"fn_top{k}_all": sums["all"] / measured,
    }


def export_embeddings(bank: FeatureBank, path: str) -> None:
    """CSV with header label,f0,...,f{D-1}; 9 significant digits per value."""
    dim = bank.features.shape[1]
    with open(path, "w", newline="", encoding="utf-8") as f:
        writer = csv.writer(f)
        writer.writerow(["label"] + [f"f{i}" for i in range(dim)])
        for label, row in zip(bank.labels, bank.features):
            writer.writerow([int(label)] + [f"{v:.9g}" for v in row])
