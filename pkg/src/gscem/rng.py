"""Seed handling.

Every random draw in the package comes from a Philox generator built from a
master seed plus a tuple of labels. The same (seed, labels) pair always yields
the same stream, independent of the order in which streams are requested.
"""
import zlib

import numpy as np


def _label_key(label):
    if isinstance(label, (int, np.integer)):
        return int(label)
    return zlib.crc32(str(label).encode("utf8"))


def seed_sequence(seed, *labels):
    return np.random.SeedSequence(entropy=int(seed),
                                  spawn_key=tuple(_label_key(l) for l in labels))


def make_rng(seed, *labels):
    """Return a counter-based ``numpy.random.Generator`` for ``seed`` and labels."""
    return np.random.Generator(np.random.Philox(seed_sequence(seed, *labels)))


def derive_seed(seed, *labels):
    """Derive a child integer seed (63 bit) from ``seed`` and labels."""
    state = seed_sequence(seed, *labels).generate_state(2, dtype=np.uint32)
    return int((int(state[0]) << 31) ^ int(state[1])) & ((1 << 63) - 1)
