"""Collective primitives available to routines: barrier, all-reduce sum, and
broadcast over the workers taking part in one task.

All-reduce sums contributions in worker order, and every participant performs
the identical left-to-right summation, so results are bit-identical across
participants and across runs for a fixed worker count.

Each collective costs a single barrier: deposit slots alternate between two
generations, so a participant can never clobber a slot another participant is
still reading (it would have to pass the next call's barrier first).
"""

from __future__ import annotations

import threading

import numpy as np


class CollectiveAborted(Exception):
    """Another participant failed; this task is dead."""


class CollectiveGroup:
    """One task's communicator over ``size`` participants.

    Not reusable after abort(); create a fresh group per task.
    """

    def __init__(self, size):
        self.size = size
        self._slots = [[None] * size, [None] * size]
        self._bcast = [None, None]
        self._gen = [0] * size  # per-rank generation, flipped per collective
        if size > 1:
            self._barrier = threading.Barrier(size)

    def barrier(self):
        if self.size == 1:
            return
        try:
            self._barrier.wait()
        except threading.BrokenBarrierError:
            raise CollectiveAborted("collective group aborted") from None

    def abort(self):
        """Wake everyone blocked on the barrier with CollectiveAborted."""
        if self.size > 1:
            self._barrier.abort()

    def allreduce_sum(self, rank, array):
        """Element-wise sum of every participant's array, identical on all."""
        if self.size == 1:
            return np.array(array, dtype=np.float64, copy=True)
        gen = self._gen[rank]
        self._gen[rank] = gen ^ 1
        slots = self._slots[gen]
        slots[rank] = np.asarray(array, dtype=np.float64)
        self.barrier()
        total = slots[0].copy()
        for other in slots[1:]:
            total += other
        return total

    def broadcast(self, rank, array=None, root=0):
        """Every participant returns root's array (shared, do not mutate)."""
        if self.size == 1:
            return array
        gen = self._gen[rank]
        self._gen[rank] = gen ^ 1
        if rank == root:
            self._bcast[gen] = array
        self.barrier()
        return self._bcast[gen]
