"""Deterministic random streams and an order-independent task pool.

Every stream is keyed by ``(master seed, task path)`` through numpy's
``SeedSequence`` spawn keys, so results do not depend on worker count or
scheduling order.
"""

from __future__ import annotations

import math
import os
import zlib
from concurrent.futures import ProcessPoolExecutor
from typing import Callable, Iterable, Sequence

import numpy as np

WORKERS_ENV = "SAUSAGE_LAB_WORKERS"


def _key_part(part) -> int:
    if isinstance(part, (int, np.integer)):
        if part < 0:
            raise ValueError("stream keys must be nonnegative")
        return int(part)
    return zlib.crc32(str(part).encode("utf-8"))


def seed_sequence(seed, *key) -> np.random.SeedSequence:
    if isinstance(seed, np.random.SeedSequence):
        base = seed
        return np.random.SeedSequence(base.entropy, spawn_key=tuple(base.spawn_key) + tuple(_key_part(k) for k in key))
    return np.random.SeedSequence(int(seed), spawn_key=tuple(_key_part(k) for k in key))


def derive_rng(seed, *key) -> np.random.Generator:
    """Generator for the stream ``(seed, *key)``; a Generator passes through
    unchanged when no key is given."""
    if isinstance(seed, np.random.Generator):
        if key:
            raise TypeError("cannot derive keyed streams from a live Generator")
        return seed
    return np.random.Generator(np.random.PCG64(seed_sequence(seed, *key)))


def resolve_workers(workers: int | None = None) -> int:
    if workers is None:
        workers = int(os.environ.get(WORKERS_ENV, "1"))
    return max(1, int(workers))


def map_tasks(fn: Callable, tasks: Sequence, workers: int | None = None) -> list:
    """``[fn(t) for t in tasks]``, optionally on a process pool; output order
    always follows ``tasks``."""
    workers = resolve_workers(workers)
    if workers == 1 or len(tasks) <= 1:
        return [fn(t) for t in tasks]
    with ProcessPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(fn, tasks))


def fsum_mean(values: Iterable[float]) -> float:
    vals = list(values)
    return math.fsum(vals) / len(vals)
