"""Chunked data-parallel map.

Chunk boundaries depend only on the problem size, never on the worker
count, so results are bitwise identical for any number of workers.
"""

import os
from concurrent.futures import ThreadPoolExecutor

_workers = None


def default_workers():
    env = os.environ.get("RADMVS_WORKERS")
    if env:
        return max(1, int(env))
    return os.cpu_count() or 1


def set_workers(n):
    global _workers
    _workers = None if n is None else max(1, int(n))


def get_workers():
    return _workers if _workers is not None else default_workers()


def chunk_slices(n, size):
    return [slice(i, min(i + size, n)) for i in range(0, n, size)]


def pmap(fn, items):
    items = list(items)
    workers = get_workers()
    if workers == 1 or len(items) <= 1:
        return [fn(it) for it in items]
    with ThreadPoolExecutor(max_workers=workers) as ex:
        return list(ex.map(fn, items))
