"""Seed derivation for independent, reproducible random streams.

A stream seed is ``root_seed XOR stable_hash(tags)``, where the hash is the
first 8 bytes of a BLAKE2b digest of the tags' ``repr``. Tags are things like
``("simulate", 17)`` or ``("infer", "sis-N64", 17, 2)``; the same tags always
give the same stream, different tags give (practically) independent streams.
"""

from __future__ import annotations

import hashlib

import numpy as np

_MASK64 = (1 << 64) - 1


def stable_hash(*tags) -> int:
    digest = hashlib.blake2b(repr(tags).encode("utf-8"), digest_size=8).digest()
    return int.from_bytes(digest, "little")


def derive_seed(root_seed: int, *tags) -> int:
    return (int(root_seed) & _MASK64) ^ stable_hash(*tags)


def stream(root_seed: int, *tags) -> np.random.Generator:
    """Return a fresh generator for the stream named by ``tags``."""
    return np.random.default_rng(derive_seed(root_seed, *tags))
