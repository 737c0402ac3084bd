"""Deterministic RNG streams derived from one run seed.

Every random decision in the package draws from a generator keyed by the
run seed plus a structural path (purpose id, layer, branch indices, epoch,
sample id, ...). Streams are therefore stateless: the same key always
yields the same generator, which is what makes checkpoint resume and
branch-insensitive initialization work.
"""

import numpy as np

# Purpose ids, first element of every spawn key.
INIT = 0
CLUSTER = 1
SHUFFLE = 2
NOISE = 3
SPLIT = 4
SYNTH = 5
SAMPLER = 6
EVAL = 7


def stream(seed: int, *key: int) -> np.random.Generator:
    """Generator for (seed, key). Keys are small non-negative ints."""
    ss = np.random.SeedSequence(entropy=int(seed), spawn_key=tuple(int(k) for k in key))
    return np.random.Generator(np.random.PCG64(ss))
