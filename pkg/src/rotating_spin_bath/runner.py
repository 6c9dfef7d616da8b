from __future__ import annotations

from collections.abc import Callable, Sequence
from concurrent.futures import ProcessPoolExecutor
import logging
import os
import time
from typing import TypeVar

from .store import RunStore


logger = logging.getLogger(__name__)

T = TypeVar("T")
R = TypeVar("R")


def default_workers() -> int:
    return max(1, os.cpu_count() or 1)


class SweepRunner:
    """Worker pool whose results always come back in submission order.

    Reductions downstream (products over groups, means over seeds) iterate the returned
    list front to back, so results do not depend on the worker count.
    """

    def __init__(
        self,
        workers: int | None = None,
        *,
        store: RunStore | None = None,
        run_id: int | None = None,
    ):
        resolved = default_workers() if workers is None else workers
        if resolved < 1:
            raise ValueError("workers must be >= 1")
        self.workers = resolved
        self.store = store
        self.run_id = run_id
        self._started_at_monotonic = time.monotonic()

    def uptime_seconds(self) -> float:
        return time.monotonic() - self._started_at_monotonic

    def map(self, fn: Callable[[T], R], items: Sequence[T], *, label: str = "sweep") -> list[R]:
        tasks = list(items)
        if not tasks:
            return []
        pool_size = min(self.workers, len(tasks))
        self._record("sweep_started", f"{label}: {len(tasks)} tasks on {pool_size} workers")
        started = time.monotonic()
        if pool_size == 1:
            results = [fn(task) for task in tasks]
        else:
            with ProcessPoolExecutor(max_workers=pool_size) as executor:
                results = list(executor.map(fn, tasks))
        elapsed = time.monotonic() - started
        self._record("sweep_finished", f"{label}: {len(tasks)} tasks in {elapsed:.2f}s")
        return results

    def _record(self, event_type: str, message: str) -> None:
        logger.info(message)
        if self.store is not None:
            self.store.add_event(self.run_id, event_type, message)
