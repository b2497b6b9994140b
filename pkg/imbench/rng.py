"""
Counter-based random streams.

Every stochastic step draws from a Philox generator keyed by
(master seed, stream id, counter...), so results never depend on the
order in which work is scheduled.
"""

import zlib

import numpy as np


def stream_id(name):
    """Stable integer id for a named stream"""
    return zlib.crc32(name.encode('utf-8'))


def counter_rng(seed, *key):
    """Philox generator for ``seed`` and the integer counter ``key``"""
    if seed < 0:
        raise ValueError(f"seed must be non-negative, got {seed}")
    sequence = np.random.SeedSequence(int(seed), spawn_key=tuple(int(k) for k in key))
    return np.random.Generator(np.random.Philox(sequence))
