"""Deterministic sub-seed derivation so pipeline stages are independently
reproducible from one top-level seed."""

from __future__ import annotations

import hashlib

import numpy as np


def derive_seed(seed: int, *parts) -> int:
    """Stable 64-bit sub-seed from a root seed and a stage/name path."""
    text = ":".join([str(seed)] + [str(p) for p in parts])
    digest = hashlib.sha256(text.encode("utf-8")).digest()
    return int.from_bytes(digest[:8], "little")


def derive_rng(seed: int, *parts) -> np.random.Generator:
    return np.random.default_rng(derive_seed(seed, *parts))
