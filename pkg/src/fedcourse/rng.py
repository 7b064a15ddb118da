"""Named, reproducible random streams.

Every stochastic choice in the package draws from a substream derived from
the single experiment seed plus a tuple of naming parts (strings or ints).
Identical seed and name always yield the identical stream, independent of
call order, which is what makes whole runs byte-reproducible.
"""

from __future__ import annotations

import hashlib
import struct

import numpy as np


def _scope_key(parts: tuple[object, ...]) -> tuple[int, ...]:
    if not parts:
        raise ValueError("substream needs at least one naming part")
    key: list[int] = []
    for part in parts:
        if not isinstance(part, (str, int)):
            raise TypeError(f"substream parts must be str or int, got {type(part).__name__}")
        digest = hashlib.sha256(repr(part).encode("utf-8")).digest()
        key.extend(struct.unpack("<2I", digest[:8]))
    return tuple(key)


def substream(seed: int, *parts: object) -> np.random.Generator:
    """Return the generator for the named substream of ``seed``."""
    seq = np.random.SeedSequence(seed, spawn_key=_scope_key(parts))
    return np.random.default_rng(seq)
