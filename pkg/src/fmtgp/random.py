"""Named, reproducible random streams derived from one root seed."""

import zlib

import numpy as np


def stream(seed, purpose, *index):
    """Independent generator for ``purpose`` (and optional integer indices).

    Streams for different purposes never overlap, so adding restarts does
    not perturb data generation and vice versa.
    """
    key = (zlib.crc32(purpose.encode()),) + tuple(int(i) for i in index)
    return np.random.default_rng(np.random.SeedSequence(int(seed), spawn_key=key))
