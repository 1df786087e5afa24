"""Keyed random streams.

Every replication and chain gets its own counter-based Philox stream derived
from ``(master_seed, *keys)``, so results never depend on execution order or
worker count.
"""

import numpy as np


def make_rng(seed: int, *keys: int) -> np.random.Generator:
    entropy = [int(seed) & 0xFFFFFFFFFFFFFFFF, *[int(k) for k in keys]]
    return np.random.Generator(np.random.Philox(np.random.SeedSequence(entropy)))
