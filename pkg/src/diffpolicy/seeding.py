"""Deterministic sub-seed derivation.

All randomness in the package funnels through one root seed; every
consumer derives its own stream with a stable hash of (seed, purpose),
so adding a consumer never perturbs the others.
"""

import hashlib

import numpy as np


def derive_seed(seed, *purpose):
    """Stable 64-bit sub-seed from a root seed and purpose strings/ints."""
    h = hashlib.sha256()
    h.update(str(int(seed)).encode())
    for part in purpose:
        h.update(b"/")
        h.update(str(part).encode())
    return int.from_bytes(h.digest()[:8], "little")


def make_rng(seed, *purpose):
    """numpy Generator seeded from derive_seed(seed, *purpose)."""
    return np.random.default_rng(derive_seed(seed, *purpose))
