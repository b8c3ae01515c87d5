"""Deterministic per-path random streams and ordered parallel map.

Each Monte Carlo path (or replication) ``i`` draws from its own PCG64
generator seeded by ``SeedSequence(seed, spawn_key=(stream, i))``, so
results do not depend on chunking or on the number of worker threads.
"""

from __future__ import annotations

import os
from concurrent.futures import ThreadPoolExecutor

import numpy as np

CHUNK = 256


def generator(seed: int, index: int, stream: int = 0) -> np.random.Generator:
    ss = np.random.SeedSequence(int(seed), spawn_key=(int(stream), int(index)))
    return np.random.Generator(np.random.PCG64(ss))


def normals(seed: int, start: int, count: int, shape, stream: int = 0) -> np.ndarray:
    """Standard normals for paths start..start+count-1, one stream per path."""
    shape = tuple(np.atleast_1d(shape))
    out = np.empty((count,) + shape)
    for j in range(count):
        out[j] = generator(seed, start + j, stream).standard_normal(shape)
    return out


def max_threads() -> int:
    env = os.environ.get("MFGLQ_THREADS")
    if env:
        try:
            return max(1, int(env))
        except ValueError:
            pass
    return max(1, os.cpu_count() or 1)


def chunks(total: int, size: int = CHUNK):
    return [(s, min(size, total - s)) for s in range(0, total, size)]


def ordered_map(fn, items) -> list:
    """Apply fn to items, possibly in threads; results come back in item order."""
    items = list(items)
    workers = min(max_threads(), len(items))
    if workers <= 1:
        return [fn(it) for it in items]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(fn, items))


def sqrt_psd(C: np.ndarray) -> np.ndarray:
    """Symmetric square root of a PSD covariance."""
    lam, V = np.linalg.eigh(0.5 * (C + C.T))
    return (V * np.sqrt(np.clip(lam, 0.0, None))) @ V.T
