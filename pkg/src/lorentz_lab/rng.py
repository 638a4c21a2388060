"""Counter-based random streams keyed by (seed, stage, replica)."""

from __future__ import annotations

import enum

import numpy as np

from lorentz_lab.errors import DomainError

_U64 = 1 << 64
_INDEX_BITS = 48


class Stage(enum.IntEnum):
    """Pipeline stage tags mixed into every stream id."""

    BILLIARD = 1
    TABLE = 2
    CHAIN = 3
    PAIR = 4
    PROJECTIONS = 5
    BOOTSTRAP = 6
    BATTERY = 7
    PROBES = 8
    PERMUTATION = 9


def stream_id(stage: Stage, index: int = 0) -> int:
    """Pack a stage tag and a replica (or slice) index into one 64-bit id."""
    if not 0 <= index < (1 << _INDEX_BITS):
        raise DomainError(f"stream index out of range: {index}")
    return (int(stage) << _INDEX_BITS) | index


def derive_stream(seed: int, stream: int) -> np.random.Generator:
    """Return an independent Philox generator for ``(seed, stream)``.

    The Philox key is the 128-bit concatenation of the stream id and the
    seed, so the draws depend on nothing but those two integers.
    """
    if not 0 <= seed < _U64:
        raise DomainError(f"seed must fit in 64 bits, got {seed}")
    if not 0 <= stream < _U64:
        raise DomainError(f"stream id must fit in 64 bits, got {stream}")
    return np.random.Generator(np.random.Philox(key=(stream << 64) | seed))


def replica_stream(seed: int, stage: Stage, index: int) -> np.random.Generator:
    """Shorthand for ``derive_stream(seed, stream_id(stage, index))``."""
    return derive_stream(seed, stream_id(stage, index))
