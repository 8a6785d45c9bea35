"""Named random sub-streams derived from a single root seed.

``derive_rng(seed, "data", 3)`` hashes each name to a 32-bit key (CRC32 for
strings, the value itself for non-negative ints) and uses the keys as the
``spawn_key`` of a ``numpy.random.SeedSequence`` rooted at ``seed``. Streams
with different names are statistically independent, and any stage can be
rerun alone from the root seed.
"""

from __future__ import annotations

import zlib

import numpy as np


def _key(name) -> int:
    if isinstance(name, (int, np.integer)) and name >= 0:
        return int(name)
    return zlib.crc32(str(name).encode("utf-8"))


def derive_seed_sequence(seed: int, *names) -> np.random.SeedSequence:
    return np.random.SeedSequence(entropy=int(seed), spawn_key=tuple(_key(n) for n in names))


def derive_rng(seed: int, *names) -> np.random.Generator:
    return np.random.default_rng(derive_seed_sequence(seed, *names))
