"""Deterministic seed derivation.

All randomness in the package flows through `rng_for`, which derives a
64-bit seed by FNV-1a hashing the string "part|part|..." built from the
master seed and a role path (e.g. ``rng_for(master, "train", client, round)``).
FNV-1a is stable across platforms and Python versions, so identical configs
reproduce identical runs everywhere.
"""

from __future__ import annotations

import numpy as np

_FNV_OFFSET = 0xCBF29CE484222325
_FNV_PRIME = 0x100000001B3
_MASK64 = 0xFFFFFFFFFFFFFFFF


def fnv1a_64(text: str) -> int:
    """64-bit FNV-1a hash of a UTF-8 string."""
    h = _FNV_OFFSET
    for byte in text.encode("utf-8"):
        h ^= byte
        h = (h * _FNV_PRIME) & _MASK64
    return h


def derive_seed(*parts) -> int:
    """Derive a 64-bit seed from the '|'-joined string forms of `parts`."""
    return fnv1a_64("|".join(str(p) for p in parts))


def rng_for(*parts) -> np.random.Generator:
    """A PCG64 generator seeded deterministically from `parts`."""
    return np.random.Generator(np.random.PCG64(derive_seed(*parts)))
