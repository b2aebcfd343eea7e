"""Named random substreams derived from a single integer seed."""

import zlib

import numpy as np


def _key(name):
    if isinstance(name, (int, np.integer)):
        return int(name)
    return zlib.crc32(str(name).encode("utf-8"))


def substream(seed, *names):
    """Return a Generator keyed by ``seed`` and a path of names.

    The same (seed, names) always yields the same stream, independent of
    the order in which other streams were requested.
    """
    seed = 0 if seed is None else int(seed)
    ss = np.random.SeedSequence(seed, spawn_key=tuple(_key(n) for n in names))
    return np.random.default_rng(ss)


def subseed(seed, *names):
    """Integer seed for a named substream (for APIs that take ints)."""
    return int(substream(seed, *names).integers(0, 2**63 - 1))
