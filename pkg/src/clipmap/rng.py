"""Named random sub-streams derived from a single run seed."""

from __future__ import annotations

import zlib

import numpy as np

STREAMS = ("data", "model", "maps", "shuffle")


def substream(seed: int, name: str, *extra: int) -> np.random.Generator:
    """Independent generator for ``name`` (e.g. ``"model"``), reproducible from ``seed``.

    ``extra`` integers further split the stream (per-index data generation,
    per-epoch shuffles) without consuming draws from the parent.
    """
    key = (zlib.crc32(name.encode("utf-8")),) + tuple(int(e) for e in extra)
    seq = np.random.SeedSequence(entropy=int(seed), spawn_key=key)
    return np.random.Generator(np.random.PCG64(seq))
