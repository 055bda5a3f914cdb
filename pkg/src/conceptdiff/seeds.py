"""Deterministic RNG stream derivation.

Every stochastic stage derives its generator from (root seed, *path), where
path elements are ints or short strings. Strings are hashed with CRC-32 so
the derivation is stable across processes and platforms.
"""

import zlib

import numpy as np


def _as_int(part) -> int:
    if isinstance(part, (int, np.integer)):
        return int(part)
    if isinstance(part, str):
        return zlib.crc32(part.encode("utf-8"))
    raise TypeError(f"unsupported seed path element: {part!r}")


def rng_for(seed: int, *path) -> np.random.Generator:
    """Independent generator for the stream identified by (seed, *path)."""
    key = [_as_int(seed)] + [_as_int(p) for p in path]
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence(key)))
