"""Named random substreams derived from a single run seed."""

import zlib
from typing import Union

import numpy as np

Name = Union[str, int]


def _spawn_key(names) -> tuple:
    key = []
    for name in names:
        if isinstance(name, (int, np.integer)):
            key.append(int(name) & 0xFFFFFFFF)
        else:
            key.append(zlib.crc32(str(name).encode("utf-8")))
    return tuple(key)


def substream(seed: int, *names: Name) -> np.random.Generator:
    """
    Get an independent generator for a named purpose.

    Args:
        seed: Master seed of the run.
        names: Stream path, e.g. ``("episode", 12, 0)``.

    Returns:
        numpy Generator that depends only on ``seed`` and ``names``.
    """
    sequence = np.random.SeedSequence(entropy=int(seed) & 0xFFFFFFFFFFFFFFFF, spawn_key=_spawn_key(names))
    return np.random.default_rng(sequence)


def derive_seed(seed: int, *names: Name) -> int:
    """Get an integer seed for a named purpose (for APIs that take ints)."""
    sequence = np.random.SeedSequence(entropy=int(seed) & 0xFFFFFFFFFFFFFFFF, spawn_key=_spawn_key(names))
    return int(sequence.generate_state(1, dtype=np.uint32)[0])
