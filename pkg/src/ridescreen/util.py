"""Deterministic seed derivation shared across modules."""

import hashlib

import numpy as np


def derive_seed(master: int, *tags) -> int:
    """Stable 64-bit seed from a master seed and a tag path.

    Independent of call order and process, so per-vehicle / per-iteration
    streams can be derived in any order (or in parallel) without changing
    the generated values.
    """
    text = ":".join([str(int(master))] + [str(t) for t in tags])
    digest = hashlib.sha256(text.encode("utf-8")).digest()
    return int.from_bytes(digest[:8], "little")


def rng_for(master: int, *tags) -> np.random.Generator:
    """A fresh PCG64 generator seeded from ``derive_seed(master, *tags)``."""
    return np.random.default_rng(derive_seed(master, *tags))
