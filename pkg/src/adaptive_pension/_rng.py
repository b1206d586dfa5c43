"""Deterministic RNG stream derivation.

Every random draw in the package comes from a generator keyed by
``(seed, *keys)`` so that a scenario's randomness never depends on how
scenarios are scheduled across workers.
"""

import numpy as np

# stream tags within a scenario
RETURNS = 0
CURVE = 1
LIFE = 2
PROJECTION = 3
SYNTHESIS = 4


def stream(seed: int, *keys: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([int(seed), *map(int, keys)]))
