"""Thread-count policy and an order-preserving parallel map.

Work items carry their own pre-derived random streams, so results never
depend on the number of threads or on scheduling.
"""
from __future__ import annotations

import os
from concurrent.futures import ThreadPoolExecutor
from typing import Callable, Iterable, TypeVar

from .errors import ValidationError

ENV_THREADS = "SEP_PIPELINE_THREADS"

T = TypeVar("T")
R = TypeVar("R")


def thread_count() -> int:
    cores = os.cpu_count() or 1
    raw = os.environ.get(ENV_THREADS, "").strip()
    if not raw:
        return cores
    try:
        cap = int(raw)
    except ValueError:
        raise ValidationError(f"{ENV_THREADS} must be a positive integer, got {raw!r}") from None
    if cap < 1:
        raise ValidationError(f"{ENV_THREADS} must be a positive integer, got {cap}")
    return min(cap, cores)


def pmap(fn: Callable[[T], R], items: Iterable[T], threads: int | None = None) -> list[R]:
    items = list(items)
    threads = thread_count() if threads is None else threads
    if threads <= 1 or len(items) <= 1:
        return [fn(x) for x in items]
    with ThreadPoolExecutor(max_workers=min(threads, len(items))) as pool:
        return list(pool.map(fn, items))
