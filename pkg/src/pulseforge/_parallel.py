"""Order-preserving thread fan-out for simulator calls (the RK4 kernel releases the GIL)."""

from __future__ import annotations

import os
from concurrent.futures import ThreadPoolExecutor

THREADS_ENV = "PULSEFORGE_THREADS"


def default_threads() -> int:
    value = os.environ.get(THREADS_ENV, "").strip()
    if not value:
        return 1
    n = int(value)
    if n < 1:
        raise ValueError(f"{THREADS_ENV} must be >= 1, got {value!r}")
    return n


def pmap(fn, items, threads: int | None = None) -> list:
    items = list(items)
    threads = default_threads() if threads is None else threads
    if threads <= 1 or len(items) <= 1:
        return [fn(x) for x in items]
    with ThreadPoolExecutor(max_workers=threads) as pool:
        return list(pool.map(fn, items))
