"""Seeded random streams.

Every source of randomness in the library draws from a Philox counter-based
generator keyed by ``(seed, stream)``.  Philox4x64 produces identical output
on every platform, so node/edge splits, weight initialization, dropout masks
and negative samples are bit-reproducible given a seed.  Each use site owns a
named stream; adding or removing one consumer never shifts the randomness
seen by another.
"""

from __future__ import annotations

import os

import numpy as np

# Stream ids. Append only; renumbering breaks reproducibility of old runs.
WEIGHT_INIT = 1
DROPOUT = 2
NODE_SPLIT = 3
EDGE_SPLIT = 4
KMEANS = 5
MAE_MASK = 6
MAE_PROBE = 7
NEGATIVES = 8
DEAD_CODE = 9
HEAD = 10
CLUSTER = 11
DATASET = 12

DEFAULT_SEED_ENV = "NID_SEED"


def make_rng(seed: int, stream: int = 0) -> np.random.Generator:
    """Return a Philox generator keyed by (seed, stream)."""
    key = np.array([seed % (1 << 64), stream % (1 << 64)], dtype=np.uint64)
    return np.random.Generator(np.random.Philox(key=key))


def default_seed(explicit: int | None = None) -> int:
    """Resolve a seed: explicit value, then NID_SEED, then 0."""
    if explicit is not None:
        return int(explicit)
    env = os.environ.get(DEFAULT_SEED_ENV)
    return int(env) if env else 0
