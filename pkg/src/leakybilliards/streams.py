"""Counter-based random streams.

All randomness in the package flows through Philox generators keyed by
(master seed, purpose tags).  Philox is counter-based, so streams for
distinct tags are independent and reproducible without any shared
state; results do not depend on worker count because draws happen in a
fixed vectorized order before any work is split across threads.
"""

from __future__ import annotations

import hashlib

import numpy as np


def stream_key(master_seed: int, *tags) -> int:
    """Derive a 128-bit Philox key from the master seed and tags."""
    h = hashlib.sha256()
    h.update(str(int(master_seed)).encode())
    for tag in tags:
        h.update(b"\x1f")
        h.update(str(tag).encode())
    return int.from_bytes(h.digest()[:16], "little")


def stream(master_seed: int, *tags) -> np.random.Generator:
    """Independent generator for one purpose, e.g. stream(seed, "init")."""
    return np.random.Generator(np.random.Philox(key=stream_key(master_seed, *tags)))
