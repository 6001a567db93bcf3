"""Named random sub-streams derived from one run seed."""

from __future__ import annotations

import zlib

import numpy as np

STREAMS = ("data", "init", "proposals", "cache", "eval", "batches")


def stream_key(name: str) -> int:
    return zlib.crc32(name.encode("utf-8"))


def child_rng(seed: int, name: str, *keys: int) -> np.random.Generator:
    """Generator for ``(seed, name, *keys)``; independent of call order."""
    return np.random.default_rng([int(seed), stream_key(name), *(int(k) for k in keys)])


def child_seed(seed: int, name: str, *keys: int) -> int:
    return int(child_rng(seed, name, *keys).integers(0, 2**31 - 1))
