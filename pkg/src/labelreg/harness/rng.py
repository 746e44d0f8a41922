"""Named random streams derived from a run seed.

Each consumer (segnet init, aux-head init, data order, augmentation, ...)
draws from its own generator, so enabling one consumer never shifts the
numbers another one sees.
"""

import zlib

import numpy as np

STREAMS = ("ae_init", "ae_order", "init", "aux_init", "order", "augment", "introspect")


def stream(seed: int, name: str) -> np.random.Generator:
    if name not in STREAMS:
        raise KeyError(f"unknown rng stream {name!r}")
    return np.random.default_rng(np.random.SeedSequence([int(seed), zlib.crc32(name.encode())]))
