"""Stable seed derivation shared by the optimisers and the experiment harness."""

from __future__ import annotations

import hashlib


def hash64(*parts: object) -> int:
    """Deterministic 64-bit seed from an ordered tuple of simple values.

    Independent of PYTHONHASHSEED and platform; values are rendered with
    ``repr`` and joined with an unambiguous separator.
    """
    text = "\x1f".join(f"{type(p).__name__}:{p!r}" for p in parts)
    return int.from_bytes(hashlib.blake2b(text.encode(), digest_size=8).digest(), "little") >> 1
