"""Order-preserving map over a process pool; workers never change results."""

from __future__ import annotations

from concurrent.futures import ProcessPoolExecutor

from .errors import InputError


def pmap(fn, items, workers: int = 1, chunksize: int = 16) -> list:
    """``[fn(x) for x in items]``, optionally spread over ``workers`` processes.

    ``fn`` must be picklable (a module-level function or a partial of one).
    """
    if workers < 1:
        raise InputError("workers must be >= 1")
    items = list(items)
    if workers == 1 or len(items) <= 1:
        return [fn(x) for x in items]
    with ProcessPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(fn, items, chunksize=max(1, chunksize)))
