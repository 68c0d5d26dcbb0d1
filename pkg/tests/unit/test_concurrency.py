import threading
import time

import anyio
import pytest

from cov3d.concurrency import CapacityLimiter, TaskGroup, parallel_map, run_parallel


class TestCapacityLimiter:
    def test_rejects_zero_tokens(self):
        with pytest.raises(ValueError):
            CapacityLimiter(0)

    async def test_limits_concurrency(self):
        limiter = CapacityLimiter(2)
        active = 0
        peak = 0

        async def _job():
            nonlocal active, peak
            async with limiter:
                active += 1
                peak = max(peak, active)
                await anyio.sleep(0.01)
                active -= 1

        async with TaskGroup() as tg:
            for _ in range(6):
                tg.start_soon(_job)
        assert peak == 2
        assert limiter.total_tokens == 2


def test_task_group_requires_context():
    with pytest.raises(RuntimeError, match="not active"):
        TaskGroup().start_soon(lambda: None)


async def test_parallel_map_keeps_order():
    def _slow_square(x: int) -> int:
        time.sleep(0.001 * (5 - x))
        return x * x

    assert await parallel_map(_slow_square, [1, 2, 3, 4], max_concurrency=4) == [
        1,
        4,
        9,
        16,
    ]


async def test_parallel_map_single_reader_is_sequential():
    lock = threading.Lock()
    running = []
    overlaps = []

    def _job(x: int) -> int:
        with lock:
            overlaps.append(len(running))
            running.append(x)
        time.sleep(0.002)
        with lock:
            running.remove(x)
        return x

    assert await parallel_map(_job, list(range(5)), max_concurrency=1) == list(range(5))
    assert overlaps == [0] * 5


async def test_parallel_map_propagates_first_error():
    def _job(x: int) -> int:
        if x in (2, 3):
            raise ValueError(f"bad item {x}")
        return x

    with pytest.raises(ValueError, match="bad item 2"):
        await parallel_map(_job, [0, 1, 2, 3], max_concurrency=2)


async def test_parallel_map_rejects_bad_limit():
    with pytest.raises(ValueError):
        await parallel_map(str, [1], max_concurrency=0)


def test_run_parallel_from_sync_code():
    assert run_parallel(str, [1, 2, 3], max_concurrency=2) == ["1", "2", "3"]
    assert run_parallel(str, []) == []
