"""Stable seed derivation so every stage draws from one run seed."""

from __future__ import annotations

import hashlib


def stable_seed(*parts: object) -> int:
    """64-bit seed from the parts, identical across processes and platforms.

    Python's builtin ``hash`` is salted per process; this one is not, which
    is what makes mock responses and per-sample RNG streams reproducible.
    """
    text = "|".join(str(p) for p in parts)
    digest = hashlib.sha256(text.encode("utf-8")).digest()
    return int.from_bytes(digest[:8], "big")
