"""Deterministic seed derivation.

Every random stream in the workbench is seeded by hashing a master seed
together with a purpose label, so adding a new purpose never perturbs the
draws of existing ones, and results are stable across platforms and runs.
"""

from __future__ import annotations

import hashlib

import numpy as np


def derive_seed(master_seed: int, label: str) -> int:
    """Return a 63-bit seed derived from ``master_seed`` and ``label``."""
    digest = hashlib.sha256(f"{master_seed}:{label}".encode("utf-8")).digest()
    return int.from_bytes(digest[:8], "little") & 0x7FFF_FFFF_FFFF_FFFF


def make_rng(master_seed: int, label: str) -> np.random.Generator:
    """Independent generator for one named purpose."""
    return np.random.default_rng(derive_seed(master_seed, label))
