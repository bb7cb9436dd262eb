"""Counter-based random streams.

Every random draw in the package is addressed by ``(seed, stream name, *counters)``
and backed by a Philox generator, so a draw never depends on how many other
draws happened before it. Resuming at step ``s`` therefore sees exactly the
same randomness as an uninterrupted run.
"""

from __future__ import annotations

import zlib

import numpy as np

STREAMS = ("mask", "sample", "dropout", "perturb", "data", "init", "corpus", "task")

_MASK64 = (1 << 64) - 1


def stream_id(name: str) -> int:
    return zlib.crc32(name.encode("utf-8"))


def generator(seed: int, stream: str, *counters: int) -> np.random.Generator:
    """Return a fresh generator for one addressed substream."""
    key = [int(seed) & _MASK64, stream_id(stream)] + [int(c) & _MASK64 for c in counters]
    return np.random.Generator(np.random.Philox(np.random.SeedSequence(key)))


def mix64(*words: int) -> int:
    """Fold integers into one 64-bit key (splitmix64 finalizer per word)."""
    h = 0x9E3779B97F4A7C15
    for w in words:
        h = (h ^ (int(w) & _MASK64)) & _MASK64
        h = (h + 0x9E3779B97F4A7C15) & _MASK64
        h = ((h ^ (h >> 30)) * 0xBF58476D1CE4E5B9) & _MASK64
        h = ((h ^ (h >> 27)) * 0x94D049BB133111EB) & _MASK64
        h ^= h >> 31
    return h


class DropoutStream:
    """Hands out one generator per dropout call site within a step.

    Op ids are assigned in call order, so two forward passes that execute the
    same op sequence with the same ``(seed, step)`` see identical masks.
    """

    def __init__(self, seed: int, step: int, salt: int = 0):
        self.seed = seed
        self.step = step
        self.salt = salt
        self.op_id = 0

    def next(self) -> np.random.Generator:
        g = generator(self.seed, "dropout", self.step, self.salt, self.op_id)
        self.op_id += 1
        return g
