"""Derive independent random streams from a single run seed.

Every consumer asks for a generator keyed by ``(seed, purpose, *index)``.
The key is fed to :class:`numpy.random.SeedSequence` as a spawn key, so
streams for different purposes or indices never overlap and do not depend
on the order in which they are requested.
"""

import numpy as np

# Fixed purpose tags. Never renumber: changing a value changes every run.
DATA = 1
PARTITION = 2
INIT = 3
SHUFFLE = 4
PARTICIPATION = 5
VERIFY = 6
FINETUNE = 7


def rng_for(seed: int, purpose: int, *index: int) -> np.random.Generator:
    if seed < 0:
        raise ValueError(f"seed must be non-negative, got {seed}")
    seq = np.random.SeedSequence(int(seed), spawn_key=(int(purpose), *map(int, index)))
    return np.random.default_rng(seq)


def seed_for(seed: int, purpose: int, *index: int) -> int:
    """Integer sub-seed for APIs that take a plain int."""
    seq = np.random.SeedSequence(int(seed), spawn_key=(int(purpose), *map(int, index)))
    return int(seq.generate_state(1, dtype=np.uint32)[0])
