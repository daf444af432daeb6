"""Deterministic seed derivation.

Every random decision in a run draws from a generator derived from the run
seed plus a tuple of tags, so adding a consumer never shifts another one.
"""
import zlib

import numpy as np


def _tag(t) -> int:
    if isinstance(t, (int, np.integer)):
        return int(t) & 0xFFFFFFFF
    return zlib.crc32(str(t).encode())


def derive_seed(seed: int, *tags) -> int:
    ss = np.random.SeedSequence(entropy=int(seed), spawn_key=tuple(_tag(t) for t in tags))
    return int(ss.generate_state(1, dtype=np.uint64)[0] >> 1)


def rng(seed: int, *tags) -> np.random.Generator:
    return np.random.default_rng(derive_seed(seed, *tags))
