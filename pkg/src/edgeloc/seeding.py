"""Deterministic RNG fan-out from one master seed.

Every random draw in the package flows through `derive_rng`, keyed by the
master seed plus a tuple of string/int tags naming the consumer (for
example ``("match", reference_id, query_id)``). Tags are hashed with
BLAKE2b so the streams are stable across processes and runs.
"""

from __future__ import annotations

import hashlib

import numpy as np


def stable_hash64(value) -> int:
    """64-bit digest of a string or int, stable across processes."""
    data = f"{type(value).__name__}:{value}".encode("utf-8")
    return int.from_bytes(hashlib.blake2b(data, digest_size=8).digest(), "little")


def derive_rng(master_seed: int, *tags) -> np.random.Generator:
    """Independent generator for (master_seed, tags)."""
    entropy = [int(master_seed) & 0xFFFFFFFFFFFFFFFF]
    entropy.extend(stable_hash64(tag) for tag in tags)
    return np.random.default_rng(np.random.SeedSequence(entropy))


def derive_seed(master_seed: int, *tags) -> int:
    """64-bit sub-seed for consumers that take a plain integer."""
    return int(derive_rng(master_seed, *tags).integers(0, 2**63 - 1))
