"""Named random streams derived from one global seed.

``stream(seed, "replicate", 3, "hmc", "pcp_pe")`` hashes each name part with
CRC-32 (integers are used as is) and passes the result as the spawn key of a
``SeedSequence``.  The same seed and names give the same stream regardless of
which other streams were created, so sub-runs reproduce on their own.
"""

from __future__ import annotations

import zlib

import numpy as np


def _key(part) -> int:
    if isinstance(part, (int, np.integer)):
        if part < 0:
            raise ValueError("integer stream keys must be non-negative")
        return int(part)
    return zlib.crc32(str(part).encode("utf-8"))


def seed_sequence(seed: int, *names) -> np.random.SeedSequence:
    return np.random.SeedSequence(int(seed), spawn_key=tuple(_key(n) for n in names))


def stream(seed: int, *names) -> np.random.Generator:
    """Independent generator for the named sub-run."""
    return np.random.default_rng(seed_sequence(seed, *names))
