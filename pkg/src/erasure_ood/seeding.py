"""Seeded random streams.

Every random draw in the package comes from a Philox-4x64 counter-based
generator (``numpy.random.Philox``) keyed through ``numpy.random.SeedSequence``.
A stream is named by the run seed plus a path of labels; string labels are
mapped to integers with CRC-32, so ``make_rng(7, "epoch", 3)`` is keyed by
``SeedSequence(7, spawn_key=(crc32(b"epoch"), 3))``.  Distinct paths give
independent streams and the same path always replays the same numbers.
"""

from __future__ import annotations

import zlib

import numpy as np


def _label(part) -> int:
    if isinstance(part, str):
        return zlib.crc32(part.encode("utf-8"))
    return int(part)


def make_rng(seed: int, *stream) -> np.random.Generator:
    ss = np.random.SeedSequence(int(seed), spawn_key=tuple(_label(p) for p in stream))
    return np.random.Generator(np.random.Philox(ss))
