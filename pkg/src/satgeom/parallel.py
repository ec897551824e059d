"""Deterministic row-block threading for per-pixel raster operations.

The image is always partitioned into the same fixed-size row blocks, each
computed by a pure function of its inputs and merged in block order, so the
output is bitwise identical for every thread count.
"""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor

BLOCK_ROWS = 32


def thread_map(fn, total_rows: int, n_threads: int = 1, block_rows: int = BLOCK_ROWS):
    """Apply fn(row_start, row_end) over fixed row blocks; returns results in order."""
    blocks = [(r, min(r + block_rows, total_rows)) for r in range(0, total_rows, block_rows)]
    if n_threads <= 1 or len(blocks) == 1:
        return [fn(r0, r1) for r0, r1 in blocks]
    with ThreadPoolExecutor(max_workers=n_threads) as ex:
        return list(ex.map(lambda b: fn(*b), blocks))
