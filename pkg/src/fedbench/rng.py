"""Counter-based random streams.

Every stochastic choice in a run draws from a generator keyed by
``(seed, *keys)``, so the result of one client/round/purpose never depends on
how many numbers another consumer pulled before it.
"""
from __future__ import annotations

import hashlib

import numpy as np


def _key_to_int(key) -> int:
    if isinstance(key, (bool, np.bool_)):
        return int(key)
    if isinstance(key, (int, np.integer)):
        if key < 0:
            raise ValueError(f"stream keys must be non-negative, got {key}")
        return int(key)
    digest = hashlib.blake2b(str(key).encode("utf-8"), digest_size=8).digest()
    return int.from_bytes(digest, "little")


def stream(seed: int, *keys) -> np.random.Generator:
    """Independent generator for ``(seed, *keys)``; strings are hashed stably."""
    entropy = [_key_to_int(seed)] + [_key_to_int(k) for k in keys]
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence(entropy)))


def derive_seed(seed: int, *keys) -> int:
    """A plain integer seed derived from ``(seed, *keys)``."""
    return int(stream(seed, *keys).integers(0, 2**62))
