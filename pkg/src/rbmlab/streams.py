"""Reproducible Gaussian increments for path ensembles.

Each path draws from its own Philox generator keyed by ``(seed, stream_id)``.
Philox is counter based, so a path's increments depend only on that key and
never on how paths are batched or scheduled across threads.
"""

from __future__ import annotations

import os
from dataclasses import dataclass

import numpy as np

_MASK64 = (1 << 64) - 1


@dataclass(frozen=True)
class RandomSource:
    seed: int
    stream_id: int = 0

    def generator(self, stream_id: int | None = None) -> np.random.Generator:
        sid = self.stream_id if stream_id is None else stream_id
        key = np.array([self.seed & _MASK64, sid & _MASK64], dtype=np.uint64)
        return np.random.Generator(np.random.Philox(key=key))

    def increments(self, n_steps: int, d: int, dt: float, stream_id: int | None = None) -> np.ndarray:
        """Brownian increments of variance ``dt``, shape ``(n_steps, d)``.

        Row ``k`` is the increment over step ``k``.
        """
        z = self.generator(stream_id).standard_normal((n_steps, d))
        return np.sqrt(dt) * z

    def batch_increments(self, stream_ids, n_steps: int, d: int, dt: float) -> np.ndarray:
        out = np.empty((len(stream_ids), n_steps, d))
        sq = np.sqrt(dt)
        for i, sid in enumerate(stream_ids):
            self.generator(int(sid)).standard_normal(out=out[i])
        out *= sq
        return out

    def spawn(self, offset: int) -> "RandomSource":
        """Source whose streams do not overlap with this one's (distinct seed key)."""
        return RandomSource((self.seed * 1_000_003 + offset) & _MASK64, self.stream_id)


def thread_count() -> int:
    """Worker threads for ensembles: ``RBM_THREADS`` if set, else the CPU count."""
    env = os.environ.get("RBM_THREADS")
    if env:
        try:
            return max(1, int(env))
        except ValueError:
            pass
    return os.cpu_count() or 1
