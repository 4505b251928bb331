"""Deterministic RNG streams derived from a single root seed.

Every random choice in the package flows from one root seed, split into
named child streams so that results never depend on evaluation order or
worker scheduling.
"""

import zlib

import numpy as np


def _as_entropy(part) -> int:
    if isinstance(part, (int, np.integer)):
        return int(part) % (1 << 63)
    return zlib.crc32(str(part).encode("utf-8"))


def rng_for(root_seed: int, *path) -> np.random.Generator:
    """Generator for the stream named by ``path`` under ``root_seed``.

    Path components may be ints (epoch, example index) or short strings
    naming the consumer ("pad", "augment", ...). The same (root, path)
    always yields the same stream.
    """
    entropy = [_as_entropy(root_seed)] + [_as_entropy(p) for p in path]
    return np.random.default_rng(np.random.SeedSequence(entropy))
