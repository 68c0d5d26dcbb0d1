"""
Bounded parallelism for per-scan work: anyio wrappers and `parallel_map`.

Loading and preprocessing scans is read-only and independent per scan, so it
runs in worker threads whose number is capped by a `CapacityLimiter`. With a
limit of 1 items are processed strictly one after another (single-reader
mode).
"""

import logging
from types import TracebackType
from typing import Any, Callable, Optional, TypeVar, cast

import anyio
import anyio.to_thread

T = TypeVar("T")
R = TypeVar("R")

logger = logging.getLogger(__name__)

__all__ = [
    "CapacityLimiter",
    "TaskGroup",
    "parallel_map",
    "run_parallel",
]


class CapacityLimiter:
    """A context manager for limiting the number of concurrent operations.
    Wraps anyio.CapacityLimiter.
    """

    def __init__(self, total_tokens: float):
        if total_tokens < 1:
            raise ValueError("The total number of tokens must be >= 1")
        self._limiter = anyio.CapacityLimiter(total_tokens)

    async def __aenter__(self) -> None:
        await self.acquire()

    async def __aexit__(
        self,
        exc_type: Optional[type[BaseException]],
        exc_val: Optional[BaseException],
        exc_tb: Optional[TracebackType],
    ) -> None:
        self.release()

    async def acquire(self) -> None:
        await self._limiter.acquire()

    def release(self) -> None:
        self._limiter.release()

    @property
    def total_tokens(self) -> float:
        return self._limiter.total_tokens


class TaskGroup:
    """Thin wrapper over anyio's task group."""

    def __init__(self):
        self._anyio_task_group = None

    def start_soon(self, func: Callable[..., Any], *args: Any) -> None:
        if self._anyio_task_group is None:
            raise RuntimeError("TaskGroup is not active")
        self._anyio_task_group.start_soon(func, *args)

    async def __aenter__(self) -> "TaskGroup":
        self._anyio_task_group = anyio.create_task_group()
        await self._anyio_task_group.__aenter__()
        return self

    async def __aexit__(self, exc_type, exc_val, exc_tb) -> Optional[bool]:
        return await self._anyio_task_group.__aexit__(exc_type, exc_val, exc_tb)


async def parallel_map(
    func: Callable[[T], R],
    items: list[T],
    max_concurrency: int = 1,
) -> list[R]:
    """
    Apply a synchronous function to each item in worker threads, with limited
    concurrency.

    Args:
        func: The blocking function to apply to each item.
        items: The list of items to process.
        max_concurrency: The maximum number of concurrently running calls.

    Returns:
        A list of results in the same order as the input items.

    Raises:
        Exception: Propagates the first exception (in item order) raised by func.
    """
    if max_concurrency < 1:
        raise ValueError("max_concurrency must be at least 1")

    limiter = CapacityLimiter(max_concurrency)
    results: list[Optional[R]] = [None] * len(items)
    exceptions: list[Optional[Exception]] = [None] * len(items)

    async def _worker(index: int, item: T) -> None:
        async with limiter:
            try:
                results[index] = await anyio.to_thread.run_sync(func, item)
            except Exception as exc:  # pylint: disable=broad-except
                exceptions[index] = exc

    if max_concurrency == 1:
        for i, item_val in enumerate(items):
            await _worker(i, item_val)
    else:
        async with TaskGroup() as tg:
            for i, item_val in enumerate(items):
                tg.start_soon(_worker, i, item_val)

    for exc in exceptions:
        if exc is not None:
            raise exc

    logger.debug(f"parallel_map processed {len(items)} items")
    return cast(list[R], results)


def run_parallel(
    func: Callable[[T], R], items: list[T], max_concurrency: int = 1
) -> list[R]:
    """Blocking entry point for `parallel_map` from synchronous code."""
    return anyio.run(parallel_map, func, items, max_concurrency)
