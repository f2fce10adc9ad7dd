"""Deterministic randomness: one 64-bit seed, many named counter-based streams."""

import hashlib

import numpy as np

_U64 = (1 << 64) - 1


def _digest(seed, path):
    text = repr((int(seed),) + tuple(path)).encode("utf-8")
    return hashlib.sha256(text).digest()


class SeededStreams:
    """Family of independent random streams derived from a single seed.

    Streams are addressed by a path of names and indices, e.g.
    ``streams.stream("env", 3)`` or ``streams.stream("init")``.  The same
    (seed, path) pair always yields the same Philox counter stream,
    independent of creation order, scheduling, or platform.
    """

    def __init__(self, seed):
        seed = int(seed)
        if not 0 <= seed <= _U64:
            raise ValueError(f"seed must fit in 64 bits, got {seed}")
        self.seed = seed

    def derive(self, *path) -> int:
        """Stable 64-bit child seed for (seed, path)."""
        return int.from_bytes(_digest(self.seed, path)[:8], "little")

    def stream(self, *path) -> np.random.Generator:
        """Independent generator keyed on (seed, path)."""
        key = int.from_bytes(_digest(self.seed, path)[:16], "little")
        return np.random.Generator(np.random.Philox(key=key))


def stream_for(seed, *path) -> np.random.Generator:
    """One-shot helper: the stream `path` under `seed`."""
    return SeededStreams(seed).stream(*path)
