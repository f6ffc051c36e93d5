"""Named random sub-streams derived from a single 64-bit seed.

Every consumer of randomness asks for its own stream by name, e.g.
``substream(seed, "split")`` or ``substream(seed, "rf", "tree", 17)``, so that
adding a new consumer never shifts the numbers drawn by an existing one.
"""
from __future__ import annotations

import zlib

import numpy as np

MAX_SEED = 2**64 - 1


def check_seed(seed) -> int:
    if isinstance(seed, bool) or not isinstance(seed, (int, np.integer)):
        raise TypeError(f"seed must be an integer, got {type(seed).__name__}")
    seed = int(seed)
    if not 0 <= seed <= MAX_SEED:
        raise ValueError(f"seed must lie in [0, 2**64), got {seed}")
    return seed


def _key(name) -> int:
    if isinstance(name, (int, np.integer)) and not isinstance(name, bool):
        return int(name) & 0xFFFFFFFF
    return zlib.crc32(str(name).encode("utf-8"))


def substream(seed: int, *names) -> np.random.Generator:
    seq = np.random.SeedSequence(check_seed(seed), spawn_key=tuple(_key(n) for n in names))
    return np.random.Generator(np.random.PCG64(seq))


def subseed(seed: int, *names) -> int:
    """A 32-bit integer seed for code that cannot take a Generator (numba kernels)."""
    seq = np.random.SeedSequence(check_seed(seed), spawn_key=tuple(_key(n) for n in names))
    return int(seq.generate_state(1, dtype=np.uint32)[0])
