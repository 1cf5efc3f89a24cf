"""Deterministic seed derivation.

All randomness in the pipeline flows from one global seed through named
sub-seeds, so any stage can be reproduced in isolation without threading
generator objects through every call. Hashing uses SHA-256, not Python's
salted ``hash``, so derived seeds are stable across processes and platforms.
"""

from __future__ import annotations

import hashlib

import numpy as np


def derive_seed(*parts: object) -> int:
    """Fold an arbitrary tuple of labels into a stable 63-bit seed."""
    h = hashlib.sha256()
    for part in parts:
        h.update(repr(part).encode("utf-8"))
        h.update(b"\x1f")
    return int.from_bytes(h.digest()[:8], "big") >> 1


def rng_for(*parts: object) -> np.random.Generator:
    """A numpy Generator seeded by ``derive_seed(*parts)``."""
    return np.random.default_rng(derive_seed(*parts))
