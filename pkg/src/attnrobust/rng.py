"""Seed derivation and explicitly seeded generators.

Every random stream in the package comes from a Philox counter-based
generator. Child seeds are derived from a master seed plus a tuple of keys
(strings or integers) through ``numpy.random.SeedSequence``, which is a
stable, platform-independent hash. Changing one key (e.g. the corruption
stream) never perturbs the others (e.g. weight initialization).
"""

from __future__ import annotations

import zlib

import numpy as np

_MASK64 = (1 << 64) - 1


def _key_to_int(key: int | str) -> int:
    if isinstance(key, str):
        return zlib.crc32(key.encode("utf-8"))
    if key < 0:
        raise ValueError(f"seed keys must be non-negative, got {key}")
    return int(key)


def derive_seed(seed: int, *keys: int | str) -> int:
    """Hash ``(seed, *keys)`` into a new unsigned 64-bit seed."""
    entropy = [int(seed) & _MASK64]
    # the key count is mixed in so that (s, 0) and (s,) differ
    spawn = tuple(_key_to_int(k) for k in keys) + (len(keys),)
    state = np.random.SeedSequence(entropy, spawn_key=spawn).generate_state(2, np.uint32)
    return (int(state[0]) << 32) | int(state[1])


def make_rng(seed: int, *keys: int | str) -> np.random.Generator:
    """Return a Philox generator seeded from ``derive_seed(seed, *keys)``."""
    return np.random.Generator(np.random.Philox(derive_seed(seed, *keys)))
