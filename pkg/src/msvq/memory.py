"""FIFO negative-sample queues.

Each queue holds Q unit-norm embedding columns in a ring buffer and is full
from construction onward: it starts with random unit vectors, and every
enqueue overwrites the oldest entries. Stored values are plain arrays, so
no gradient can ever flow into queue contents. Labels ride along only when
analysis mode asks for them; the loss path never reads them.
"""

from __future__ import annotations

import numpy as np

from .errors import CapacityError, ParameterError, ShapeError


class NegativeQueue:
    """D x Q ring of embedding columns, oldest replaced first."""

    def __init__(self, capacity: int, dim: int, rng: np.random.Generator,
                 dtype=np.float32, with_labels: bool = False):
        if capacity < 1 or dim < 1:
            raise ParameterError(
                f"queue needs capacity, dim >= 1, got ({capacity}, {dim})"
            )
        self.capacity = capacity
        self.dim = dim
        cols = rng.standard_normal((dim, capacity)).astype(dtype)
        cols /= np.linalg.norm(cols, axis=0, keepdims=True)
        self._storage = cols          # physical ring, column-major slots
        self._head = 0                # index of the oldest column
        self.labels: np.ndarray | None = (
            np.full(capacity, -1, dtype=np.int64) if with_labels else None
        )

    def enqueue_dequeue(self, z: np.ndarray, labels: np.ndarray | None = None) -> None:
        """Replace the N oldest columns with the rows of z (N x D)."""
        z = np.asarray(z)
        if z.ndim != 2 or z.shape[1] != self.dim:
            raise ShapeError(f"enqueue: batch {z.shape} vs queue dim {self.dim}")
        n = z.shape[0]
        if n > self.capacity:
            raise CapacityError(
                f"enqueue of {n} rows exceeds queue capacity {self.capacity}"
            )
        idx = (self._head + np.arange(n)) % self.capacity
        self._storage[:, idx] = z.T
        if self.labels is not None:
            if labels is None:
                self.labels[idx] = -1
            else:
                self.labels[idx] = np.asarray(labels, dtype=np.int64)
        self._head = (self._head + n) % self.capacity

    def as_matrix(self) -> np.ndarray:
        """Dense snapshot, columns ordered oldest to newest."""
        return np.roll(self._storage, -self._head, axis=1).copy()

    def labels_snapshot(self) -> np.ndarray:
        if self.labels is None:
            raise ParameterError("queue was built without label tracking")
        return np.roll(self.labels, -self._head).copy()

    # Checkpoint plumbing: physical ring plus head index round-trips exactly.
    def state(self) -> tuple[np.ndarray, int, np.ndarray | None]:
        return self._storage, self._head, self.labels

    def load_state(self, storage: np.ndarray, head: int,
                   labels: np.ndarray | None) -> None:
        if storage.shape != self._storage.shape:
            raise ShapeError(
                f"queue state {storage.shape} vs expected {self._storage.shape}"
            )
        self._storage = storage
        self._head = int(head) % self.capacity
        self.labels = labels


def new_queue(capacity: int, dim: int, rng: np.random.Generator,
              dtype=np.float32, with_labels: bool = False) -> NegativeQueue:
    return NegativeQueue(capacity, dim, rng, dtype=dtype, with_labels=with_labels)
