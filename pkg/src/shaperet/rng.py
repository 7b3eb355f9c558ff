"""Deterministic RNG derivation.

Every random decision in the pipeline draws from a Generator derived from a
tuple of keys (seed, role, epoch, step, shape_id, ...). Hashing the keys with
SHA-256 gives streams that are independent of each other and stable across
platforms and numpy versions.
"""

from __future__ import annotations

import hashlib

import numpy as np

_SEP = b"\x1f"


def _encode_key(key: int | float | str | bytes) -> bytes:
    if isinstance(key, bool):  # bool is an int subclass; keep the tag distinct
        return b"b:" + (b"1" if key else b"0")
    if isinstance(key, int):
        return b"i:" + str(key).encode()
    if isinstance(key, float):
        return b"f:" + key.hex().encode()
    if isinstance(key, str):
        return b"s:" + key.encode("utf-8")
    if isinstance(key, bytes):
        return b"y:" + key
    raise TypeError(f"unsupported rng key type: {type(key).__name__}")


def derive_entropy(*keys: int | float | str | bytes) -> int:
    """Hash a key tuple into a 128-bit entropy integer."""
    h = hashlib.sha256()
    for key in keys:
        h.update(_encode_key(key))
        h.update(_SEP)
    return int.from_bytes(h.digest()[:16], "little")


def derive_rng(*keys: int | float | str | bytes) -> np.random.Generator:
    """Return a PCG64 Generator seeded from the hashed key tuple."""
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence(derive_entropy(*keys))))
