"""Deterministic, splittable random streams.

Every stream is a PCG64 generator seeded from ``SeedSequence(seed,
spawn_key=key)``.  Keys are tuples of non-negative integers (block index,
sample index, ...), so a stream depends only on *what* it is used for and
never on scheduling order.
"""

from __future__ import annotations

import numpy as np

# Key namespaces keep streams of different consumers disjoint.
TREE = 0
BATCH = 1
NESTED = 2
BSDE = 3
PATH = 4


def stream(seed: int, *key: int) -> np.random.Generator:
    if seed < 0:
        raise ValueError("seed must be non-negative")
    ss = np.random.SeedSequence(int(seed), spawn_key=tuple(int(k) for k in key))
    return np.random.Generator(np.random.PCG64(ss))
