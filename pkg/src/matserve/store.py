"""Server-side distributed dense matrix storage.

A matrix of ``rows`` rows over ``p`` workers is split block-row: worker ``w``
owns rows ``[w*ceil(rows/p), min((w+1)*ceil(rows/p), rows))``. Trailing
workers may own empty ranges when ``p > rows``. Each worker holds its block
as a row-major float64 shard plus a fill bitmap; a matrix becomes ready only
once every owned row arrived exactly once. Shards are immutable after that.
"""

from __future__ import annotations

import threading
from dataclasses import dataclass, field

import numpy as np


class StoreError(Exception):
    """Base for storage violations."""


class RowOutOfRange(StoreError):
    pass


class WidthMismatch(StoreError):
    pass


class DuplicateRow(StoreError):
    pass


class ShardIncomplete(StoreError):
    pass


@dataclass(frozen=True)
class Layout:
    rows: int
    cols: int
    assignment: tuple  # of (worker_id, row_start, row_end_excl), one per worker

    @property
    def workers(self):
        return len(self.assignment)

    def range_of(self, worker_id):
        _, start, end = self.assignment[worker_id]
        return start, end

    def owner_of(self, row_index):
        if not 0 <= row_index < self.rows:
            raise RowOutOfRange(f"row {row_index} outside [0, {self.rows})")
        block = -(-self.rows // self.workers)
        return int(row_index // block)


def plan_layout(rows, cols, p):
    """Canonical block-row assignment of ``rows`` rows over ``p`` workers."""
    if rows < 0:
        raise ValueError("rows must be >= 0")
    if cols < 1:
        raise ValueError("cols must be >= 1")
    if p < 1:
        raise ValueError("worker count must be >= 1")
    block = -(-rows // p)  # ceil(rows/p); 0 when rows == 0
    assignment = []
    for w in range(p):
        start = min(w * block, rows)
        end = min(start + block, rows)
        assignment.append((w, start, end))
    return Layout(rows, cols, tuple(assignment))


class Shard:
    """One worker's contiguous row block of a distributed matrix."""

    def __init__(self, matrix_id, row_start, row_end, cols):
        self.matrix_id = matrix_id
        self.row_start = row_start
        self.row_end = row_end
        self.cols = cols
        self.data = np.zeros((row_end - row_start, cols), dtype=np.float64)
        self._filled = np.zeros(row_end - row_start, dtype=bool)
        self._n_filled = 0

    @classmethod
    def prefilled(cls, matrix_id, row_start, row_end, cols, data):
        shard = cls.__new__(cls)
        shard.matrix_id = matrix_id
        shard.row_start = row_start
        shard.row_end = row_end
        shard.cols = cols
        data = np.ascontiguousarray(data, dtype=np.float64)
        if data.shape != (row_end - row_start, cols):
            raise StoreError(
                f"shard data shape {data.shape} != ({row_end - row_start}, {cols})"
            )
        shard.data = data
        shard._filled = np.ones(row_end - row_start, dtype=bool)
        shard._n_filled = row_end - row_start
        return shard

    @property
    def complete(self):
        return self._n_filled == self.row_end - self.row_start

    @property
    def missing(self):
        return (self.row_end - self.row_start) - self._n_filled

    @property
    def nbytes(self):
        return self.data.nbytes

    def ingest(self, indices, values):
        """Store rows at their global indices. Rejects out-of-range, wrong
        width, and duplicate rows; on rejection nothing is written."""
        indices = np.asarray(indices, dtype=np.int64)
        values = np.asarray(values, dtype=np.float64)
        if values.ndim != 2 or values.shape[0] != indices.shape[0]:
            raise WidthMismatch("one value row per index required")
        if values.shape[1] != self.cols:
            raise WidthMismatch(
                f"row width {values.shape[1]} != matrix cols {self.cols}"
            )
        if indices.size == 0:
            return
        local = indices - self.row_start
        bad = (local < 0) | (local >= self.row_end - self.row_start)
        if bad.any():
            raise RowOutOfRange(
                f"row {int(indices[bad][0])} outside owned range "
                f"[{self.row_start}, {self.row_end})"
            )
        if self._filled[local].any():
            dup = int(indices[self._filled[local]][0])
            raise DuplicateRow(f"row {dup} already received")
        uniq, counts = np.unique(local, return_counts=True)
        if (counts > 1).any():
            dup = int(uniq[counts > 1][0] + self.row_start)
            raise DuplicateRow(f"row {dup} appears twice in one batch")
        self.data[local] = values
        self._filled[local] = True
        self._n_filled += indices.size

    def extract(self, row_start, row_count):
        """Return (indices, values) for an owned range of a complete shard,
        bit-exact as stored."""
        if not self.complete:
            raise ShardIncomplete(
                f"matrix {self.matrix_id}: {self.missing} rows missing"
            )
        if row_count < 0:
            raise RowOutOfRange("row_count must be >= 0")
        if row_count == 0:
            return np.empty(0, dtype=np.uint64), np.empty((0, self.cols))
        end = row_start + row_count
        if row_start < self.row_start or end > self.row_end:
            raise RowOutOfRange(
                f"requested [{row_start}, {end}) outside owned "
                f"[{self.row_start}, {self.row_end})"
            )
        lo = row_start - self.row_start
        indices = np.arange(row_start, end, dtype=np.uint64)
        return indices, self.data[lo : lo + row_count]


def route_rows(layout, rows):
    """Assign (index, row) pairs to their owning workers.

    Returns {worker_id: [(index, row), ...]} preserving input order within
    each worker; workers receiving nothing are absent from the result.
    """
    if layout.rows == 0:
        block = 1
    else:
        block = -(-layout.rows // layout.workers)
    batches = {}
    for index, row in rows:
        if not 0 <= index < layout.rows:
            raise RowOutOfRange(f"row {index} outside [0, {layout.rows})")
        batches.setdefault(index // block, []).append((index, row))
    return batches


FILLING = "filling"
READY = "ready"
RELEASED = "released"


@dataclass
class MatrixMeta:
    matrix_id: int
    rows: int
    cols: int
    layout: Layout
    owner_session: int
    state: str = FILLING
    nbytes: int = field(init=False)

    def __post_init__(self):
        self.nbytes = self.rows * self.cols * 8


class HandleRegistry:
    """Driver-side map of matrix ids to metadata. Ids are unique for the
    server lifetime and strictly increasing, never reused."""

    def __init__(self):
        self._lock = threading.Lock()
        self._next_id = 1
        self._matrices = {}

    def create(self, rows, cols, layout, owner_session, state=FILLING):
        with self._lock:
            mid = self._next_id
            self._next_id += 1
            meta = MatrixMeta(mid, rows, cols, layout, owner_session, state)
            self._matrices[mid] = meta
            return meta

    def get(self, matrix_id):
        with self._lock:
            return self._matrices.get(matrix_id)

    def set_state(self, matrix_id, state):
        with self._lock:
            self._matrices[matrix_id].state = state

    def ids_owned_by(self, session_id):
        with self._lock:
            return [
                m.matrix_id
                for m in self._matrices.values()
                if m.owner_session == session_id and m.state != RELEASED
            ]
