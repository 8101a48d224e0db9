import os
from concurrent.futures import ThreadPoolExecutor

import numpy as np

WORKERS_ENV = "MAXLAB_WORKERS"


def default_workers() -> int:
    try:
        return max(1, int(os.environ.get(WORKERS_ENV, "1")))
    except ValueError:
        return 1


def chunk_ranges(n: int, size: int) -> list[tuple[int, int]]:
    size = max(1, int(size))
    return [(a, min(n, a + size)) for a in range(0, n, size)]


def pmap(fn, items, workers=None):
    """Ordered map; results never depend on the worker count."""
    items = list(items)
    workers = default_workers() if workers is None else max(1, int(workers))
    if workers == 1 or len(items) <= 1:
        return [fn(x) for x in items]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(fn, items))


def pairwise_sum(x, axis=0):
    # numpy's add.reduce is pairwise along contiguous axes; copy makes it so
    return np.add.reduce(np.ascontiguousarray(np.moveaxis(np.asarray(x), axis, -1)), axis=-1)

