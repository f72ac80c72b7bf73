"""In-process worker pool: long-lived worker threads, per-worker shard
stores, and serial task execution with collective coordination.

Workers are participants inside the server process rather than OS-level
ranks; each owns the shards assigned to it and executes routines as one of
``p`` symmetric participants. A routine sees only its own shard plus the
collective primitives. Tasks run one at a time, FIFO, so cross-session
requests interleave at routine-call granularity.
"""

from __future__ import annotations

import queue
import threading
import time

import numpy as np
from threadpoolctl import ThreadpoolController

from . import wire
from .collectives import CollectiveAborted, CollectiveGroup
from .store import Shard, plan_layout


class EngineError(Exception):
    """Task-level failure carrying a protocol error code."""

    def __init__(self, code, message):
        super().__init__(message)
        self.code = code


class RoutineError(EngineError):
    """Numerical failure inside a routine (protocol ERROR 7 by default)."""

    def __init__(self, message, code=wire.ERR_NUMERICAL_FAILURE):
        super().__init__(code, message)


class ResourceExhausted(EngineError):
    def __init__(self, needed, available):
        super().__init__(
            wire.ERR_RESOURCE_EXHAUSTED,
            f"allocation of {needed} bytes exceeds limit ({available} available)",
        )


class RoutineContext:
    """What one participant of a running routine gets to see."""

    def __init__(self, engine, group, rank, nranks, layouts):
        self._engine = engine
        self._group = group
        self.rank = rank
        self.nranks = nranks
        self._layouts = layouts  # matrix_id -> Layout, for the task's inputs

    def shard(self, matrix_id):
        """This participant's row block of an input matrix (do not mutate)."""
        return self._engine._workers[self.rank].shards[matrix_id].data

    def layout(self, matrix_id):
        return self._layouts[matrix_id]

    def my_range(self, matrix_id):
        return self._layouts[matrix_id].range_of(self.rank)

    def out_range(self, rows):
        """Row range this participant owns in a fresh block-row output."""
        return plan_layout(rows, 1, self.nranks).range_of(self.rank)

    def barrier(self):
        self._group.barrier()

    def allreduce_sum(self, array):
        return self._group.allreduce_sum(self.rank, array)

    def broadcast(self, array=None, root=0):
        return self._group.broadcast(self.rank, array, root)

    def check_alloc(self, nbytes):
        self._engine.check_alloc(nbytes)

    def timer(self):
        return time.perf_counter()


class OutputShard:
    """One participant's contribution to a routine output matrix."""

    def __init__(self, rows, cols, block):
        self.rows = rows
        self.cols = cols
        self.block = np.ascontiguousarray(block, dtype=np.float64)


class _Worker:
    def __init__(self, wid):
        self.wid = wid
        self.shards = {}  # matrix_id -> Shard
        self.lock = threading.Lock()
        self.mailbox = queue.Queue()


class _TaskRun:
    def __init__(self, nranks):
        self.results = [None] * nranks
        self.errors = [None] * nranks
        self.pending = nranks
        self.done = threading.Event()
        self.lock = threading.Lock()

    def finish(self, rank, result=None, error=None):
        with self.lock:
            self.results[rank] = result
            self.errors[rank] = error
            self.pending -= 1
            if self.pending == 0:
                self.done.set()


class Engine:
    """Worker pool shared by every session of one server."""

    def __init__(self, nworkers, max_matrix_bytes=None):
        if nworkers < 1:
            raise ValueError("need at least one worker")
        self.nworkers = nworkers
        self.max_matrix_bytes = max_matrix_bytes
        self._workers = [_Worker(w) for w in range(nworkers)]
        self._task_lock = threading.Lock()  # tasks are FIFO, one at a time
        # one BLAS thread per worker: the workers are the parallelism, and
        # nested BLAS pools thrash each other on small machines
        self._threadpools = ThreadpoolController()
        self._threads = []
        self._stop = object()
        for worker in self._workers:
            t = threading.Thread(
                target=self._worker_loop, args=(worker,), daemon=True,
                name=f"matserve-worker-{worker.wid}",
            )
            t.start()
            self._threads.append(t)

    def close(self):
        for worker in self._workers:
            worker.mailbox.put(self._stop)
        for t in self._threads:
            t.join(timeout=5)

    # ---- shard storage -------------------------------------------------

    def check_alloc(self, nbytes):
        if self.max_matrix_bytes is not None and nbytes > self.max_matrix_bytes:
            raise ResourceExhausted(nbytes, self.max_matrix_bytes)

    def allocate(self, matrix_id, layout):
        """Pre-allocate one shard per worker named in the layout."""
        self.check_alloc(layout.rows * layout.cols * 8)
        for wid, start, end in layout.assignment:
            worker = self._workers[wid]
            with worker.lock:
                worker.shards[matrix_id] = Shard(matrix_id, start, end, layout.cols)

    def adopt(self, matrix_id, layout, blocks):
        """Install routine-produced blocks as the complete shards of a matrix."""
        for (wid, start, end), block in zip(layout.assignment, blocks):
            worker = self._workers[wid]
            with worker.lock:
                worker.shards[matrix_id] = Shard.prefilled(
                    matrix_id, start, end, layout.cols, block
                )

    def ingest(self, worker_id, matrix_id, indices, values):
        worker = self._workers[worker_id]
        with worker.lock:
            shard = worker.shards.get(matrix_id)
            if shard is None:
                raise KeyError(matrix_id)
            shard.ingest(indices, values)

    def extract(self, worker_id, matrix_id, row_start, row_count):
        worker = self._workers[worker_id]
        with worker.lock:
            shard = worker.shards.get(matrix_id)
            if shard is None:
                raise KeyError(matrix_id)
            return shard.extract(row_start, row_count)

    def missing_rows(self, matrix_id, layout):
        missing = 0
        for wid, _, _ in layout.assignment:
            worker = self._workers[wid]
            with worker.lock:
                missing += worker.shards[matrix_id].missing
        return missing

    def free(self, matrix_id, layout):
        for wid, _, _ in layout.assignment:
            worker = self._workers[wid]
            with worker.lock:
                worker.shards.pop(matrix_id, None)

    def shard_of(self, worker_id, matrix_id):
        worker = self._workers[worker_id]
        with worker.lock:
            return worker.shards.get(matrix_id)

    # ---- task execution ------------------------------------------------

    def _worker_loop(self, worker):
        while True:
            item = worker.mailbox.get()
            if item is self._stop:
                return
            fn, ctx, run = item
            try:
                result = fn(ctx)
            except CollectiveAborted:
                run.finish(ctx.rank, error=None)
            except BaseException as exc:  # noqa: BLE001 - surfaced to the caller
                ctx._group.abort()
                run.finish(ctx.rank, error=exc)
            else:
                run.finish(ctx.rank, result=result)

    def run_routine(self, nranks, fn, layouts):
        """Execute ``fn(ctx)`` on workers 0..nranks-1 and collect results.

        Returns (per-rank results, elapsed seconds). Tasks are serialized:
        one routine call at a time across all sessions.
        """
        if nranks > self.nworkers:
            raise EngineError(
                wire.ERR_INSUFFICIENT_WORKERS,
                f"task wants {nranks} workers, pool has {self.nworkers}",
            )
        with self._task_lock, self._threadpools.limit(limits=1):
            group = CollectiveGroup(nranks)
            run = _TaskRun(nranks)
            started = time.perf_counter()
            for rank in range(nranks):
                ctx = RoutineContext(self, group, rank, nranks, layouts)
                self._workers[rank].mailbox.put((fn, ctx, run))
            run.done.wait()
            elapsed = time.perf_counter() - started
            for err in run.errors:
                if err is not None:
                    if isinstance(err, EngineError):
                        raise err
                    raise RoutineError(f"{type(err).__name__}: {err}") from err
            return run.results, elapsed
