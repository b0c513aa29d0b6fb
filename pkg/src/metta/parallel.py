"""Optional thread fan-out controlled by the METTA_THREADS variable.

Tasks must be pure; results are collected in input order and any reduction
happens afterwards in the caller, so thread count never changes results.
Nested calls from inside a worker run sequentially to avoid pool deadlock.
"""

from __future__ import annotations

import os
import threading
from concurrent.futures import ThreadPoolExecutor

_local = threading.local()


def worker_count() -> int:
    raw = os.environ.get("METTA_THREADS", "0")
    try:
        return max(0, int(raw))
    except ValueError:
        return 0


def parallel_map(fn, items) -> list:
    items = list(items)
    workers = worker_count()
    if workers <= 1 or len(items) <= 1 or getattr(_local, "in_worker", False):
        return [fn(it) for it in items]

    def task(it):
        _local.in_worker = True
        try:
            return fn(it)
        finally:
            _local.in_worker = False
    with ThreadPoolExecutor(max_workers=min(workers, len(items))) as pool:
        return list(pool.map(task, items))
