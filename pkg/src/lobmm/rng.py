"""Seeded random streams.

Every consumer derives its own generator from ``(seed, purpose)`` so adding a
consumer never shifts the draws of existing ones.
"""

from __future__ import annotations

import hashlib

import numpy as np


def substream(seed: int, purpose: str) -> np.random.Generator:
    digest = hashlib.sha256(f"{int(seed)}:{purpose}".encode()).digest()
    words = [int.from_bytes(digest[i:i + 4], "little") for i in range(0, 32, 4)]
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence(words)))


class UniformStream:
    """Buffered U[0,1) draws from a generator; consumed strictly in order."""

    __slots__ = ("_gen", "_buf", "_i", "_block")

    def __init__(self, gen: np.random.Generator, block: int = 1 << 15):
        self._gen = gen
        self._block = block
        self._buf: list = []
        self._i = 0

    def __call__(self) -> float:
        i = self._i
        if i >= len(self._buf):
            self._buf = self._gen.random(self._block).tolist()
            i = 0
        self._i = i + 1
        return self._buf[i]

    def random(self) -> float:
        return self()
