"""Deterministic seed derivation.

A single root seed fans out to per-component seeds through a labeled hash,
so adding or reordering parallel work never changes the random stream any
component sees.
"""

from __future__ import annotations

import hashlib

import numpy as np


def derive_seed(root_seed: int, label: str) -> int:
    """Derive a stable 64-bit child seed from a root seed and a label."""
    digest = hashlib.sha256(f"{root_seed}\x1f{label}".encode("utf-8")).digest()
    return int.from_bytes(digest[:8], "little")


def derive_rng(root_seed: int, label: str) -> np.random.Generator:
    """A numpy Generator seeded from (root_seed, label)."""
    return np.random.default_rng(derive_seed(root_seed, label))
