"""Named random streams derived from one root seed.

Every consumer asks for its own stream (``"data"``, ``"init"``, ``"shuffle"``,
``"augment"``) so that changing how one consumer draws numbers never shifts
another's sequence.
"""

import zlib

import numpy as np


def stream(seed: int, name: str, *keys: int) -> np.random.Generator:
    return np.random.default_rng([int(seed), zlib.crc32(name.encode()), *map(int, keys)])
