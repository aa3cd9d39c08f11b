"""Deterministic, splittable random-number streams.

Every stochastic routine in this package takes an :class:`RngState` instead of
drawing from global state. A stream is identified by a 64-bit seed plus a
spawn path, and is backed by the counter-based Philox generator, so

* the same (seed, path) always yields the same stream, and
* ``split`` produces child streams that never overlap with the parent or
  with each other, which is what lets chains, ensemble members, and grid
  cells run concurrently while staying reproducible.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


@dataclass(frozen=True)
class RngState:
    """Immutable handle for one reproducible random stream."""

    seed: int
    path: tuple[int, ...] = ()

    def __post_init__(self) -> None:
        if not 0 <= int(self.seed) < 2**64:
            raise ValueError(f"seed must be a 64-bit unsigned integer, got {self.seed}")

    def generator(self) -> np.random.Generator:
        """Fresh generator for this stream; repeated calls replay the stream."""
        ss = np.random.SeedSequence(entropy=int(self.seed), spawn_key=self.path)
        return np.random.Generator(np.random.Philox(ss))

    def split(self, n: int) -> list["RngState"]:
        """n independent child streams."""
        if n < 1:
            raise ValueError("cannot split into fewer than 1 stream")
        return [RngState(self.seed, self.path + (i,)) for i in range(n)]

    def child(self, tag: int) -> "RngState":
        """Single named child stream (tags must be unique per parent)."""
        return RngState(self.seed, self.path + (int(tag),))
