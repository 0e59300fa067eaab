"""Named, reproducible random substreams.

All randomness in the library flows from a single user seed. Components draw
from named substreams so that changing how one component consumes randomness
does not perturb the draws seen by unrelated components.
"""
from __future__ import annotations

import zlib

import numpy as np


def _key(part) -> int:
    if isinstance(part, (int, np.integer)):
        return int(part) & 0xFFFFFFFF
    if isinstance(part, str):
        return zlib.crc32(part.encode("utf-8"))
    raise TypeError(f"substream path parts must be int or str, got {type(part)!r}")


def substream(seed: int, *path) -> np.random.Generator:
    """Generator for the substream identified by ``path`` under ``seed``.

    The same (seed, path) always yields the same stream, on any platform.
    """
    ss = np.random.SeedSequence(entropy=int(seed), spawn_key=tuple(_key(p) for p in path))
    return np.random.default_rng(ss)
