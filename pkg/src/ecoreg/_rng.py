"""Named random substreams derived from a single integer seed."""

import zlib

import numpy as np


def _key(names):
    return tuple(zlib.crc32(str(n).encode("utf-8")) for n in names)


def substream_seed(seed: int, *names) -> int:
    """Deterministic 64-bit seed for the substream ``names`` of ``seed``."""
    ss = np.random.SeedSequence(int(seed) % 2**128, spawn_key=_key(names))
    return int(ss.generate_state(1, np.uint64)[0])


def substream(seed: int, *names) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence(int(seed) % 2**128, spawn_key=_key(names)))
