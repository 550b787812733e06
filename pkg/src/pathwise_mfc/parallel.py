"""Order-preserving job map over a bounded process pool."""

from __future__ import annotations

from concurrent.futures import ProcessPoolExecutor
from typing import Callable, Iterable, TypeVar

T = TypeVar("T")
R = TypeVar("R")


def parallel_map(fn: Callable[[T], R], jobs: Iterable[T], workers: int = 1) -> list[R]:
    """Apply ``fn`` to every job; results come back in job order.

    Jobs carry their own seeds, so the output does not depend on ``workers``.
    ``fn`` and the jobs must be picklable when ``workers > 1``.
    """
    jobs = list(jobs)
    if workers < 1:
        raise ValueError("workers must be >= 1")
    if workers == 1 or len(jobs) <= 1:
        return [fn(j) for j in jobs]
    with ProcessPoolExecutor(max_workers=min(workers, len(jobs))) as pool:
        return list(pool.map(fn, jobs))
