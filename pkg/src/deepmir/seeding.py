"""Deterministic seed derivation so every random stream traces back to one master seed."""

import hashlib


def derive_seed(*keys) -> int:
    """Stable 63-bit seed from any sequence of hashable-by-repr keys."""
    digest = hashlib.blake2b(repr(tuple(keys)).encode(), digest_size=8).digest()
    return int.from_bytes(digest, "little") >> 1
