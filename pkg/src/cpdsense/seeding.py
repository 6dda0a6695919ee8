"""Root-seed expansion.

Every random stream in the pipeline is derived from one root seed through
``numpy.random.SeedSequence`` with an entropy tuple of the form
``(root_seed, purpose_code, *counters)``.  The purpose codes are fixed, so a
given (root, purpose, counters) triple always yields the same stream, and
streams for different purposes never collide.
"""

from __future__ import annotations

import numpy as np

PURPOSES = {
    "data": 1,
    "init": 2,
    "augment": 3,
    "shuffle": 4,
    "scenario": 5,
}


def derive_seed_sequence(root_seed: int, purpose: str, *counters: int) -> np.random.SeedSequence:
    try:
        code = PURPOSES[purpose]
    except KeyError:
        raise ValueError(f"unknown seed purpose {purpose!r}") from None
    entropy = [int(root_seed) & 0xFFFFFFFFFFFFFFFF, code, *(int(c) for c in counters)]
    return np.random.SeedSequence(entropy)


def derive_rng(root_seed: int, purpose: str, *counters: int) -> np.random.Generator:
    return np.random.default_rng(derive_seed_sequence(root_seed, purpose, *counters))
