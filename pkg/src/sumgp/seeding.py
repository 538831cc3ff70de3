"""Deterministic per-purpose RNG streams derived from one base seed."""

from __future__ import annotations

import numpy as np

_PURPOSES = ("data", "init", "aux-init", "segment", "sample")


def rng_for(seed: int, *path) -> np.random.Generator:
    """Independent generator for (seed, replicate, purpose, ...) tuples."""
    key = [int(seed)]
    for part in path:
        key.append(_PURPOSES.index(part) if isinstance(part, str) else int(part))
    return np.random.default_rng(key)
