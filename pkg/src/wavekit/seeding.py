"""Deterministic RNG derivation.

Every stochastic component draws from a generator derived from the run seed
plus a tuple of string/int tags, so independent components never share a
stream and results are reproducible regardless of evaluation order or any
internal parallelism.
"""

from __future__ import annotations

import hashlib

import numpy as np


def _tag_to_int(tag: str | int) -> int:
    if isinstance(tag, (int, np.integer)):
        return int(tag) & 0xFFFFFFFFFFFFFFFF
    digest = hashlib.sha256(str(tag).encode("utf-8")).digest()
    return int.from_bytes(digest[:8], "little")


def derive_rng(seed: int, *tags: str | int) -> np.random.Generator:
    """Return a Generator keyed by (seed, *tags)."""
    entropy = [int(seed) & 0xFFFFFFFFFFFFFFFF] + [_tag_to_int(t) for t in tags]
    return np.random.default_rng(np.random.SeedSequence(entropy))
