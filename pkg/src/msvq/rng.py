"""Deterministic random streams derived from one root seed.

Every source of randomness in the package (augmentation draws, parameter
init, shuffling, queue init) hangs off an `RngKey`. A key is a root seed
plus a path of child identifiers; the same (seed, path) always yields the
same byte stream, independent of call order, which is what makes training
runs and checkpoint resumes replayable.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field

import numpy as np

_MASK64 = (1 << 64) - 1


def _token(part: int | str) -> int:
    if isinstance(part, (int, np.integer)):
        return int(part) & _MASK64
    digest = hashlib.sha256(str(part).encode("utf-8")).digest()
    return int.from_bytes(digest[:8], "little")


@dataclass(frozen=True)
class RngKey:
    """Root seed plus a path of stream identifiers (ints or names)."""

    seed: int
    path: tuple[int, ...] = field(default_factory=tuple)

    def child(self, *parts: int | str) -> "RngKey":
        return RngKey(self.seed, self.path + tuple(_token(p) for p in parts))

    def generator(self) -> np.random.Generator:
        ss = np.random.SeedSequence(entropy=self.seed & _MASK64, spawn_key=self.path)
        return np.random.Generator(np.random.PCG64(ss))
