"""Named, order-independent random substreams.

Every consumer of randomness asks for a stream by name plus integer keys
(``streams.get("counts", hour)``).  The stream is derived from the root seed
through ``numpy.random.SeedSequence`` spawn keys, so the draws a component sees
do not depend on which other components ran first or how many draws they made.
"""

from __future__ import annotations

import zlib

import numpy as np


def _name_key(name: str) -> int:
    return zlib.crc32(name.encode("utf-8"))


def derive_seed_sequence(seed: int, name: str, *keys: int) -> np.random.SeedSequence:
    if seed < 0:
        raise ValueError("seed must be non-negative")
    spawn_key = (_name_key(name),) + tuple(int(k) for k in keys)
    return np.random.SeedSequence(entropy=int(seed), spawn_key=spawn_key)


def substream(seed: int, name: str, *keys: int) -> np.random.Generator:
    """Generator for the stream ``(seed, name, *keys)``."""
    return np.random.Generator(np.random.PCG64(derive_seed_sequence(seed, name, *keys)))


class Streams:
    """Factory for named substreams under one root seed."""

    def __init__(self, seed: int):
        if seed < 0 or seed >= 2**64:
            raise ValueError("seed must fit in an unsigned 64-bit integer")
        self.seed = int(seed)

    def get(self, name: str, *keys: int) -> np.random.Generator:
        return substream(self.seed, name, *keys)

    def child_seed(self, name: str, *keys: int) -> int:
        """A 63-bit integer seed derived from the stream, for APIs that take ints."""
        state = derive_seed_sequence(self.seed, name, *keys).generate_state(2, np.uint32)
        return int((int(state[0]) << 31) ^ int(state[1])) & (2**63 - 1)

    def __repr__(self) -> str:
        return f"Streams(seed={self.seed})"
