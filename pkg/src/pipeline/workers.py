"""
Order-preserving parallel map over independent jobs.
"""

import contextvars
from concurrent.futures import ThreadPoolExecutor
from contextlib import contextmanager
from typing import Callable, Iterator


@contextmanager
def worker_map(threads: int = 1) -> Iterator[Callable]:
    """
    Yield a ``map``-compatible callable backed by ``threads`` workers.

    Results come back in submission order, so output never depends on the thread count.
    Each job runs in a copy of the submitting thread's context, so log bindings such as
    the current stage carry over to the workers.
    """
    if threads <= 1:
        yield lambda fn, items: list(map(fn, items))
        return

    with ThreadPoolExecutor(max_workers=threads) as pool:

        def mapped(fn: Callable, items) -> list:
            futures = [pool.submit(contextvars.copy_context().run, fn, item) for item in items]
            return [f.result() for f in futures]

        yield mapped
