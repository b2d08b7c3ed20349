"""Thread-pool helpers whose results do not depend on the worker count.

Work is always cut into the same fixed blocks; threads only decide who runs
which block.  BLAS is pinned to one thread inside those blocks so a block's
floating-point result is identical whichever worker computes it.
"""
from __future__ import annotations

import os
from concurrent.futures import ThreadPoolExecutor
from contextlib import contextmanager

from threadpoolctl import threadpool_limits

ENV_THREADS = "DEQLAB_THREADS"


def resolve_threads(threads: int | None = None) -> int:
    if threads is None:
        env = os.environ.get(ENV_THREADS, "").strip()
        threads = int(env) if env else 1
    return max(1, int(threads))


@contextmanager
def single_threaded_blas():
    with threadpool_limits(limits=1):
        yield


def run_blocks(fn, blocks, threads: int | None = None) -> list:
    """Apply fn to every block, returning results in block order."""
    blocks = list(blocks)
    n = resolve_threads(threads)
    if n == 1 or len(blocks) <= 1:
        return [fn(b) for b in blocks]
    with ThreadPoolExecutor(max_workers=n) as pool:
        return list(pool.map(fn, blocks))
