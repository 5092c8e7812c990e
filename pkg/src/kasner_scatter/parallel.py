"""Chunked mode loops; every chunk is an independent batch with no shared state."""

from __future__ import annotations

import os
from concurrent.futures import ThreadPoolExecutor

import numpy as np


def resolve_threads(threads: int | None) -> int:
    if threads is None:
        threads = int(os.environ.get("SCATTER_THREADS", "1") or 1)
    return max(1, int(threads))


def map_chunks(func, rows: np.ndarray, threads: int | None = None):
    """Apply func to contiguous chunks of rows and return the per-chunk results in order."""
    n = resolve_threads(threads)
    if n == 1 or len(rows) < 2 * n:
        return [func(rows)]
    chunks = np.array_split(rows, n)
    with ThreadPoolExecutor(max_workers=n) as pool:
        return list(pool.map(func, chunks))
