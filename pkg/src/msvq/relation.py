"""Similarity logits, relation distributions, and the five training losses.

All losses are reported in cross-entropy form: because the teacher side is
constant, CE and KL have identical gradients, and KL is recoverable as
CE minus the teacher entropy (exposed separately for logging). Teacher
logits are plain arrays (or untracked variables); gradient flows only
through the student logits.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import numcore as nc
from .errors import ConfigError, ShapeError
from .numcore import Variable

SOURCE_TAGS = ("P11", "P21", "P31", "P12", "P42")


@dataclass(frozen=True)
class Temperatures:
    """Student/teacher softmax temperatures; the teacher must be sharper."""

    tau_s: float
    tau_t: float

    def __post_init__(self):
        if self.tau_s <= 0 or self.tau_t <= 0:
            raise ConfigError(
                f"temperatures must be positive, got ({self.tau_s}, {self.tau_t})"
            )
        if not self.tau_t < self.tau_s:
            raise ConfigError(
                f"teacher temperature must be sharper than the student's: "
                f"tau_t={self.tau_t} >= tau_s={self.tau_s}"
            )


@dataclass(frozen=True)
class RelationDistribution:
    """Row-stochastic N x Q matrix of relation probabilities."""

    probs: np.ndarray
    source: str = ""

    def __post_init__(self):
        if self.source and self.source not in SOURCE_TAGS:
            raise ConfigError(f"unknown relation source tag '{self.source}'")


def similarity_logits(z: Variable | np.ndarray, queue: np.ndarray):
    """Cosine similarities of unit-norm rows against unit-norm queue columns.

    Returns a Variable when given one (keeping the gradient path), else a
    plain array.
    """
    if isinstance(z, Variable):
        return nc.matmul(z, queue)
    z = np.asarray(z)
    if z.ndim != 2 or queue.ndim != 2 or z.shape[1] != queue.shape[0]:
        raise ShapeError(f"similarity_logits: {z.shape} x {queue.shape}")
    return z @ queue


def relation_distribution(logits: np.ndarray, tau: float,
                          source: str = "") -> RelationDistribution:
    """Temperature softmax over queue similarities (teacher side, detached)."""
    probs = nc.softmax_rows_array(nc.value_of(logits), tau)
    return RelationDistribution(probs=probs, source=source)


def entropy_rows(probs: np.ndarray) -> np.ndarray:
    """Shannon entropy (nats) of each row; 0 log 0 counts as 0."""
    p = np.asarray(probs)
    with np.errstate(divide="ignore", invalid="ignore"):
        terms = np.where(p > 0, p * np.log(p), 0.0)
    return -terms.sum(axis=1)


def mean_entropy(probs: np.ndarray) -> float:
    return float(entropy_rows(probs).mean())


def _teacher_probs(logits, tau_t: float) -> np.ndarray:
    return nc.softmax_rows_array(nc.value_of(logits), tau_t)


def loss_moco(z1: Variable, z2: Variable | np.ndarray, queue: np.ndarray,
              tau: float) -> Variable:
    """InfoNCE: the matching z2 row joins the queue as the (Q+1)-th logit."""
    z2v = nc.value_of(z2)
    if nc.value_of(z1).shape != z2v.shape:
        raise ShapeError(
            f"loss_moco: z1 {nc.value_of(z1).shape} vs z2 {z2v.shape}"
        )
    neg = nc.matmul(z1, queue)                    # (N, Q)
    pos = nc.rowwise_dot(z1, z2v)                 # (N, 1)
    logits = nc.concat_cols(neg, pos)
    n, q1 = logits.value.shape
    onehot = np.zeros((n, q1), dtype=logits.value.dtype)
    onehot[:, -1] = 1.0
    return nc.soft_cross_entropy(logits, onehot, tau)


def loss_ressl(logits11: Variable, logits21, tau_s: float, tau_t: float) -> Variable:
    """Relational distillation of the teacher's queue distribution."""
    return nc.soft_cross_entropy(logits11, _teacher_probs(logits21, tau_t), tau_s)


def loss_msv(logits11: Variable, logits21, logits31,
             tau_s: float, tau_t: float) -> Variable:
    """Two weak teacher views of the same queue, averaged."""
    ce1 = nc.soft_cross_entropy(logits11, _teacher_probs(logits21, tau_t), tau_s)
    ce2 = nc.soft_cross_entropy(logits11, _teacher_probs(logits31, tau_t), tau_s)
    return nc.scale(nc.add(ce1, ce2), 0.5)


def loss_mq(logits11: Variable, logits21, logits12: Variable, logits42,
            tau_s: float, tau_t: float) -> Variable:
    """One view per teacher, each against its own queue, averaged."""
    ce1 = nc.soft_cross_entropy(logits11, _teacher_probs(logits21, tau_t), tau_s)
    ce3 = nc.soft_cross_entropy(logits12, _teacher_probs(logits42, tau_t), tau_s)
    return nc.scale(nc.add(ce1, ce3), 0.5)


def loss_msvq(logits11: Variable, logits12: Variable, logits21, logits31,
              logits42, tau_s: float, tau_t: float) -> Variable:
    """Mean of the three soft-label terms: two on queue 1, one on queue 2."""
    ce1 = nc.soft_cross_entropy(logits11, _teacher_probs(logits21, tau_t), tau_s)
    ce2 = nc.soft_cross_entropy(logits11, _teacher_probs(logits31, tau_t), tau_s)
    ce3 = nc.soft_cross_entropy(logits12, _teacher_probs(logits42, tau_t), tau_s)
    return nc.scale(nc.add(nc.add(ce1, ce2), ce3), 1.0 / 3.0)
