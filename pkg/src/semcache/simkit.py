"""Minimal discrete-event simulation kit.

Processes are plain generators that yield non-negative delays in
seconds; the scheduler resumes them in (time, spawn-order) order, so a
given setup replays identically every run. The same process code can
run against the wall clock by driving it with real sleeps.
"""

from __future__ import annotations

import heapq
import itertools
import time

from .errors import ValidationError


class Simulation:
    """Deterministic virtual-time event loop over generator processes."""

    def __init__(self):
        self._heap: list = []
        self._seq = itertools.count()
        self._now = 0.0

    @property
    def now(self) -> float:
        return self._now

    def clock(self) -> "VirtualClock":
        return VirtualClock(self)

    def spawn(self, process, delay: float = 0.0) -> None:
        """Schedule a generator process to start after delay seconds."""
        if delay < 0:
            raise ValidationError("delay must be >= 0")
        heapq.heappush(self._heap, (self._now + delay, next(self._seq), process))

    def run(self, until: float | None = None) -> None:
        """Run until the event heap drains (or simulated time passes until)."""
        while self._heap:
            t, seq, proc = self._heap[0]
            if until is not None and t > until:
                self._now = until
                return
            heapq.heappop(self._heap)
            self._now = t
            try:
                delay = next(proc)
            except StopIteration:
                continue
            if delay is None:
                delay = 0.0
            if delay < 0:
                raise ValidationError("process yielded a negative delay")
            heapq.heappush(self._heap, (self._now + delay, next(self._seq), proc))


class VirtualClock:
    def __init__(self, sim: Simulation):
        self._sim = sim

    def now(self) -> float:
        return self._sim.now


class WallClock:
    def now(self) -> float:
        return time.time()


def drive_blocking(gen, sleep=time.sleep):
    """Run a delay-yielding process to completion in real time."""
    while True:
        try:
            delay = next(gen)
        except StopIteration as stop:
            return stop.value
        if delay:
            sleep(delay)
