"""Keyed, counter-based random streams.

Every artifact draws from its own Philox stream keyed by ``(seed, purpose,
*indices)``, so regenerating one artifact never shifts the numbers another
one sees.
"""

import zlib

import numpy as np


def purpose_key(purpose: str) -> int:
    return zlib.crc32(purpose.encode("utf8"))


def rng(seed: int, purpose: str, *index: int) -> np.random.Generator:
    ss = np.random.SeedSequence([int(seed), purpose_key(purpose), *[int(i) for i in index]])
    return np.random.Generator(np.random.Philox(ss))


def derive_seed(seed: int, purpose: str, *index: int) -> int:
    """A 63-bit child seed for handing to another generator."""
    ss = np.random.SeedSequence([int(seed), purpose_key(purpose), *[int(i) for i in index]])
    return int(ss.generate_state(1, dtype=np.uint64)[0] >> np.uint64(1))
