"""Deterministic seed derivation.

One experiment-level seed fans out to every stochastic component through
SHA-256 hashing, so runs are reproducible across platforms and processes
(Python's builtin ``hash`` is salted per process and unusable here).
"""

from __future__ import annotations

import hashlib

import numpy as np

_MASK64 = (1 << 64) - 1


def derive_seed(*parts: int | str) -> int:
    """Derive a 64-bit seed from an ordered mix of integers and strings.

    Stable across runs, platforms, and Python versions. Each part is
    length-prefixed before hashing so ("ab", "c") and ("a", "bc") differ.
    """
    h = hashlib.sha256()
    for part in parts:
        if isinstance(part, bool) or not isinstance(part, (int, str)):
            raise TypeError(f"seed parts must be int or str, got {type(part).__name__}")
        data = (
            part.to_bytes(16, "little", signed=True)
            if isinstance(part, int)
            else part.encode("utf-8")
        )
        h.update(len(data).to_bytes(4, "little"))
        h.update(data)
    return int.from_bytes(h.digest()[:8], "little") & _MASK64


def rng_from(*parts: int | str) -> np.random.Generator:
    """NumPy generator seeded by :func:`derive_seed` of the parts."""
    return np.random.default_rng(derive_seed(*parts))
