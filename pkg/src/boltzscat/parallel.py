"""Deterministic chunked execution.

Work is always split into the same fixed list of chunks regardless of the
worker count; each chunk writes to its own buffer and buffers are combined
in chunk order.  Results are therefore bit-identical for any number of
workers.  Compiled kernels release the GIL, so threads can overlap.
"""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from typing import Callable, Sequence

import numpy as np

N_CHUNKS = 8


def split(n_items: int, n_chunks: int = N_CHUNKS) -> list[np.ndarray]:
    """Fixed contiguous partition of range(n_items) into at most n_chunks pieces."""
    n_chunks = max(1, min(n_chunks, n_items))
    return [c for c in np.array_split(np.arange(n_items, dtype=np.int64), n_chunks) if c.size]


def run_chunks(fn: Callable, chunks: Sequence, workers: int = 1) -> list:
    """Apply fn to each chunk; results are returned in chunk order."""
    if workers <= 1 or len(chunks) <= 1:
        return [fn(c) for c in chunks]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(fn, chunks))


def ordered_sum(parts: Sequence[np.ndarray]) -> np.ndarray:
    out = parts[0].copy()
    for p in parts[1:]:
        out += p
    return out
