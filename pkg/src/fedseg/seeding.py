"""Deterministic seed derivation for every random draw in the package.

Seeds are derived from a hash of string-serialized key parts, never from
Python's salted ``hash()``, so runs reproduce bit-for-bit across processes
and platforms.
"""

from __future__ import annotations

import hashlib

import numpy as np


def derive_seed(*parts) -> int:
    """Map an arbitrary tuple of ints/strings to a stable 64-bit seed."""
    blob = "\x1f".join(str(p) for p in parts).encode("utf-8")
    return int.from_bytes(hashlib.sha256(blob).digest()[:8], "little")


def derive_rng(*parts) -> np.random.Generator:
    return np.random.default_rng(derive_seed(*parts))


def bernoulli(p: float, *parts) -> bool:
    """One seeded coin flip, keyed by the given parts."""
    if p <= 0.0:
        return False
    if p >= 1.0:
        return True
    return bool(derive_rng(*parts).random() < p)
