"""Counter-based random substreams.

Every random quantity in the package is drawn from a Philox generator keyed
by ``(master seed, purpose tag, index)``.  Two runs that ask for the same key
get the same numbers no matter which worker executes them or in what order.
"""

from __future__ import annotations

import zlib

import numpy as np


def tag_id(tag: str) -> int:
    return zlib.crc32(tag.encode("utf-8"))


def substream(seed: int, tag: str, index: int = 0) -> np.random.Generator:
    """Return an independent generator for ``(seed, tag, index)``."""
    if seed < 0 or index < 0:
        raise ValueError("seed and index must be nonnegative")
    ss = np.random.SeedSequence([int(seed), tag_id(tag), int(index)])
    return np.random.Generator(np.random.Philox(ss))


def derive_seed(seed: int, tag: str, index: int = 0) -> int:
    """A 63-bit child seed, for handing a stream to another component."""
    ss = np.random.SeedSequence([int(seed), tag_id(tag), int(index)])
    return int(ss.generate_state(1, dtype=np.uint64)[0] >> np.uint64(1))
