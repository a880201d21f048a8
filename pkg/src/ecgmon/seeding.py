from __future__ import annotations

import hashlib

import numpy as np


def derive_seed(global_seed: int, label: str) -> int:
    """Stable 63-bit seed for a named stage, independent of call order."""
    digest = hashlib.sha256(f"{int(global_seed)}:{label}".encode()).digest()
    return int.from_bytes(digest[:8], "little") & ((1 << 63) - 1)


def stage_rng(global_seed: int, label: str) -> np.random.Generator:
    return np.random.default_rng(derive_seed(global_seed, label))
