"""Micro-batching for forward passes.

Request handlers submit jobs concurrently; a single consumer coalesces
them into batches of at most max_batch, waiting at most max_wait_ms after
the first job arrives. Each batch runs in a worker thread while the event
loop keeps serving, and the consumer awaits one batch before pulling the
next, so forward passes for a device never overlap.
"""
from __future__ import annotations

import asyncio
from typing import Any, Callable, Optional


class MicroBatcher:
    """run_batch takes a list of jobs and returns a result per job, in order."""

    def __init__(
        self,
        run_batch: Callable[[list[Any]], list[Any]],
        max_batch: int = 32,
        max_wait_ms: float = 50.0,
    ):
        if max_batch < 1:
            raise ValueError("max_batch must be at least 1")
        self._run_batch = run_batch
        self._max_batch = max_batch
        self._max_wait = max_wait_ms / 1000.0
        self._queue: asyncio.Queue = asyncio.Queue()
        self._task: Optional[asyncio.Task] = None
        self.batch_sizes: list[int] = []  # what coalescing actually happened

    async def start(self) -> None:
        if self._task is None:
            self._task = asyncio.create_task(self._consume())

    async def stop(self) -> None:
        if self._task is not None:
            self._task.cancel()
            try:
                await self._task
            except asyncio.CancelledError:
                pass
            self._task = None
        while not self._queue.empty():
            _, future = self._queue.get_nowait()
            if not future.done():
                future.set_exception(RuntimeError("batcher stopped"))

    async def submit(self, job: Any) -> Any:
        if self._task is None:
            raise RuntimeError("batcher not started")
        future = asyncio.get_running_loop().create_future()
        await self._queue.put((job, future))
        return await future

    async def _consume(self) -> None:
        loop = asyncio.get_running_loop()
        while True:
            batch = [await self._queue.get()]
            try:
                deadline = loop.time() + self._max_wait
                while len(batch) < self._max_batch:
                    timeout = deadline - loop.time()
                    if timeout <= 0:
                        break
                    try:
                        batch.append(await asyncio.wait_for(self._queue.get(), timeout))
                    except asyncio.TimeoutError:
                        break
                self.batch_sizes.append(len(batch))
                jobs = [job for job, _ in batch]
                try:
                    results = await asyncio.to_thread(self._run_batch, jobs)
                    if len(results) != len(jobs):
                        raise RuntimeError("run_batch returned wrong result count")
                except Exception as exc:
                    for _, future in batch:
                        if not future.done():
                            future.set_exception(exc)
                    continue
                for (_, future), result in zip(batch, results):
                    if not future.done():
                        future.set_result(result)
            except asyncio.CancelledError:
                # shutdown mid-batch: do not leave submitters hanging
                for _, future in batch:
                    if not future.done():
                        future.set_exception(RuntimeError("batcher stopped"))
                raise
