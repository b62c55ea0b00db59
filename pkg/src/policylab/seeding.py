"""Deterministic seed derivation for independent random streams."""

from __future__ import annotations

import hashlib


def derive_seed(*parts) -> int:
    """Stable 64-bit seed from the given parts (order-sensitive)."""
    key = ":".join(str(p) for p in parts)
    digest = hashlib.blake2b(key.encode("utf-8"), digest_size=8).digest()
    return int.from_bytes(digest, "big")
