"""Counter-based random streams.

Every random draw in the package comes from a generator keyed by
(master seed, purpose tag, index).  Purpose tags keep unrelated consumers
(weight init, attack starts, posterior noise, ...) on independent streams, and
the index lets per-example or per-batch streams be created without any shared
mutable state, so parallel evaluation stays reproducible.
"""

import hashlib

import numpy as np


def _tag_key(tag: str) -> int:
    # Stable across platforms and processes, unlike builtin hash().
    return int.from_bytes(hashlib.blake2s(tag.encode("utf-8")).digest()[:8], "big")


def stream(master_seed: int, tag: str, index: int = 0) -> np.random.Generator:
    """Return an independent generator for (master_seed, tag, index)."""
    if master_seed < 0 or index < 0:
        raise ValueError("master_seed and index must be non-negative")
    seq = np.random.SeedSequence([int(master_seed), _tag_key(tag), int(index)])
    return np.random.default_rng(seq)
