"""
Rank launcher and per-rank worker pools

Each rank runs the same program (``fn(ctx)``) on its own thread, communicating only
through its Communicator. Inside a rank, a ThreadPoolExecutor of T workers executes
cube-parallel kernels; kernels touch disjoint cubes so results never depend on T.
"""
from __future__ import annotations
import threading
from concurrent.futures import ThreadPoolExecutor
from typing import Any, Callable, List, Optional, Sequence, TypeVar

import numpy as np

from ..errors import TransportError
from .log import rank_logger
from .transport import Communicator, World

T = TypeVar("T")


class RankContext:
    """Everything a rank program needs: its id, its communicator and its worker pool"""

    def __init__(self, comm: Communicator, threads: int = 1):
        self.comm = comm
        self.rank = comm.rank
        self.size = comm.size
        self.threads = max(1, int(threads))
        self.pool: Optional[ThreadPoolExecutor] = (
            ThreadPoolExecutor(max_workers=self.threads, thread_name_prefix=f"rank{self.rank}")
            if self.threads > 1 else None
        )
        self.log = rank_logger(self.rank)

    def run_workers(self, task: Callable[[int], None]) -> None:
        """Run ``task(worker_index)`` once per worker and wait; re-raise the first failure"""
        if self.pool is None:
            task(0)
            return
        futures = [self.pool.submit(task, w) for w in range(self.threads)]
        errors = [f.exception() for f in futures]
        for err in errors:
            if err is not None:
                raise err

    def map_rows(self, fn: Callable[[np.ndarray], None], rows: Sequence[int]) -> None:
        """
        Split local cube rows into T contiguous chunks and run ``fn(chunk)`` on each.

        ``fn`` must only write the rows it is given.
        """
        rows = np.asarray(rows, dtype=np.int64)
        if rows.size == 0:
            return
        if self.pool is None or rows.size == 1:
            fn(rows)
            return
        chunks = [c for c in np.array_split(rows, min(self.threads, rows.size)) if c.size]
        futures = [self.pool.submit(fn, c) for c in chunks]
        for f in futures:
            f.result()

    def strided(self, items: Sequence[T], fn: Callable[[T], Any]) -> List[Any]:
        """
        Worker w processes items w, w+T, w+2T, ...; results come back in item order.
        """
        n = len(items)
        out: List[Any] = [None] * n
        if self.pool is None:
            for i, item in enumerate(items):
                out[i] = fn(item)
            return out

        def work(w: int) -> None:
            for i in range(w, n, self.threads):
                out[i] = fn(items[i])

        self.run_workers(work)
        return out

    def close(self) -> None:
        if self.pool is not None:
            self.pool.shutdown(wait=True)
            self.pool = None


def launch_ranks(
    size: int,
    fn: Callable[[RankContext], T],
    threads: int = 1,
    seed: Optional[int] = None,
    max_delay: float = 0.0,
) -> List[T]:
    """
    Run ``fn`` on ``size`` in-process ranks and return their results in rank order.

    Args:
        size: Number of ranks P
        fn: Rank program; receives a RankContext
        threads: Worker threads per rank
        seed: Seed of the delivery-delay generator
        max_delay: Upper bound of random delivery delays in seconds (0 disables)

    Returns:
        List of per-rank return values

    Raises:
        The first exception raised by any rank. Peers blocked in the transport are
        released by aborting the World.
    """
    world = World(size, seed=seed, max_delay=max_delay)
    results: List[Any] = [None] * size
    errors: List[Optional[BaseException]] = [None] * size

    def body(rank: int) -> None:
        ctx = RankContext(world.endpoint(rank), threads=threads)
        try:
            results[rank] = fn(ctx)
        except BaseException as exc:  # propagate to the launcher
            errors[rank] = exc
            world.abort(exc)
        finally:
            ctx.close()

    if size == 1:
        body(0)
    else:
        workers = [threading.Thread(target=body, args=(r,), name=f"rank-{r}") for r in range(size)]
        for t in workers:
            t.start()
        for t in workers:
            t.join()
    world.close()

    # Prefer the originating failure over the TransportErrors it caused on peers
    primary = [e for e in errors if e is not None and not isinstance(e, TransportError)]
    secondary = [e for e in errors if e is not None]
    if primary:
        raise primary[0]
    if secondary:
        raise secondary[0]
    return results
