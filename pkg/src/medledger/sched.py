"""Event scheduling for the in-process network.

All network components (peers, ordering nodes, clients, the edge layer)
are plain state machines driven by callbacks; the scheduler decides when
callbacks run and supplies every source of randomness. Two drivers share
one interface:

  * VirtualScheduler: a seeded discrete-event clock. Time jumps straight
    to the next event, runs are exactly reproducible from the seed, and
    fault schedules (crashes, delays) replay identically. Used by all
    correctness tests and the deterministic pipeline mode.
  * RealtimeScheduler: the same queue gated by the monotonic wall clock,
    used for throughput benchmarking where latency must reflect real
    processing cost.
"""

from __future__ import annotations

import heapq
import itertools
import random
import time


class TimerHandle:
    __slots__ = ("when", "seq", "fn", "args", "cancelled")

    def __init__(self, when, seq, fn, args):
        self.when = when
        self.seq = seq
        self.fn = fn
        self.args = args
        self.cancelled = False

    def cancel(self):
        self.cancelled = True

    def __lt__(self, other):
        return (self.when, self.seq) < (other.when, other.seq)


class SchedulerBase:
    def __init__(self, seed=None):
        self.rng = random.Random(seed)
        self._queue: list[TimerHandle] = []
        self._seq = itertools.count()
        self.events_processed = 0

    def now(self) -> float:
        raise NotImplementedError

    def call_at(self, when: float, fn, *args) -> TimerHandle:
        handle = TimerHandle(when, next(self._seq), fn, args)
        heapq.heappush(self._queue, handle)
        return handle

    def call_later(self, delay: float, fn, *args) -> TimerHandle:
        return self.call_at(self.now() + max(0.0, delay), fn, *args)

    def next_due(self) -> float | None:
        while self._queue and self._queue[0].cancelled:
            heapq.heappop(self._queue)
        return self._queue[0].when if self._queue else None

    def _pop_due(self, cutoff: float) -> TimerHandle | None:
        while self._queue:
            head = self._queue[0]
            if head.cancelled:
                heapq.heappop(self._queue)
                continue
            if head.when > cutoff:
                return None
            return heapq.heappop(self._queue)
        return None


class VirtualScheduler(SchedulerBase):
    """Deterministic discrete-event driver; `now()` is simulated seconds."""

    def __init__(self, seed=None):
        super().__init__(seed)
        self._now = 0.0

    def now(self) -> float:
        return self._now

    def step(self) -> bool:
        handle = self._pop_due(float("inf"))
        if handle is None:
            return False
        self._now = max(self._now, handle.when)
        self.events_processed += 1
        handle.fn(*handle.args)
        return True

    def run_until_idle(self, max_time: float = float("inf"),
                       max_events: int = 10_000_000):
        for _ in range(max_events):
            due = self.next_due()
            if due is None:
                return
            if due > max_time:
                self._now = max(self._now, max_time)
                return
            self.step()
        raise RuntimeError("event budget exhausted; likely a scheduling loop")

    def run_for(self, duration: float):
        target = self._now + duration
        self.run_until_idle(max_time=target)
        self._now = max(self._now, target)

    def run_until(self, predicate, timeout: float = float("inf"),
                  max_events: int = 10_000_000) -> bool:
        """Run events until `predicate` holds or `timeout` simulated seconds
        pass (measured from the current clock)."""
        deadline = self._now + timeout
        for _ in range(max_events):
            if predicate():
                return True
            due = self.next_due()
            if due is None or due > deadline:
                return predicate()
            self.step()
        raise RuntimeError("event budget exhausted; likely a scheduling loop")


class RealtimeScheduler(SchedulerBase):
    """Wall-clock driver: events run when the monotonic clock reaches them."""

    def now(self) -> float:
        return time.monotonic()

    def pump(self) -> int:
        """Run everything currently due; returns the number of events run."""
        count = 0
        while True:
            handle = self._pop_due(self.now())
            if handle is None:
                return count
            self.events_processed += 1
            handle.fn(*handle.args)
            count += 1

    def run_until(self, predicate, timeout: float) -> bool:
        """Pump events until `predicate` holds or the deadline passes."""
        deadline = self.now() + timeout
        while self.now() < deadline:
            self.pump()
            if predicate():
                return True
            due = self.next_due()
            now = self.now()
            if due is None:
                time.sleep(0.001)
            elif due > now:
                time.sleep(min(due - now, 0.002))
        return predicate()
