"""Exact time arithmetic and the two clocks (wall and virtual).

Every timestamp and duration inside the package is an integer count of
nanoseconds. Quantities that come from configuration (microsecond unit costs,
byte rates) are converted to :class:`fractions.Fraction` first so that
decimal literals such as ``0.35`` are taken at face value, and only the final
duration is rounded, always upward, to whole nanoseconds.
"""

from __future__ import annotations

import heapq
import itertools
import math
import threading
import time
from dataclasses import dataclass, field
from decimal import Decimal
from fractions import Fraction
from typing import Callable, Union

Number = Union[int, float, str, Fraction, Decimal]

NS_PER_S = 1_000_000_000
NS_PER_US = 1_000


def exact(x: Number) -> Fraction:
    """Convert *x* to a Fraction, reading floats by their shortest repr."""
    if isinstance(x, bool):
        raise TypeError("booleans are not numbers here")
    if isinstance(x, Fraction):
        return x
    if isinstance(x, int):
        return Fraction(x)
    if isinstance(x, float):
        if not math.isfinite(x):
            raise ValueError(f"non-finite value {x!r}")
        return Fraction(repr(x))
    if isinstance(x, (str, Decimal)):
        return Fraction(str(x).strip())
    raise TypeError(f"cannot interpret {x!r} as a number")


def ceil_ns(seconds: Number) -> int:
    return math.ceil(exact(seconds) * NS_PER_S)


def s_to_ns(seconds: Number) -> int:
    """Round-half-even conversion used for configured timestamps."""
    return round(exact(seconds) * NS_PER_S)


def ns_to_s(ns: int) -> float:
    return ns / NS_PER_S


def format_seconds(ns: int) -> str:
    """Shortest exact decimal for an integer ns count: ``7000000000 -> '7'``."""
    whole, frac = divmod(ns, NS_PER_S)
    if ns < 0:
        return "-" + format_seconds(-ns)
    if frac == 0:
        return str(whole)
    return f"{whole}.{frac:09d}".rstrip("0")


class WallClock:
    """Monotonic host clock. ``idle`` sleeps one poll interval."""

    virtual = False

    def __init__(self, poll_interval_s: float = 0.01):
        self.poll_interval_s = poll_interval_s

    def now_ns(self) -> int:
        return time.monotonic_ns()

    def call_at(self, t_ns: int, fn: Callable[[], None]) -> "TimerHandle":
        delay = max(0.0, (t_ns - self.now_ns()) / NS_PER_S)
        timer = threading.Timer(delay, fn)
        timer.daemon = True
        timer.start()
        return TimerHandle(t_ns, -1, fn, _timer=timer)

    def call_later(self, delay_ns: int, fn: Callable[[], None]) -> "TimerHandle":
        return self.call_at(self.now_ns() + delay_ns, fn)

    def idle(self) -> bool:
        time.sleep(self.poll_interval_s)
        return True


@dataclass(order=True)
class TimerHandle:
    t_ns: int
    seq: int
    fn: Callable[[], None] = field(compare=False)
    cancelled: bool = field(default=False, compare=False)
    _timer: threading.Timer | None = field(default=None, compare=False, repr=False)

    def cancel(self) -> None:
        self.cancelled = True
        if self._timer is not None:
            self._timer.cancel()


class VirtualClock:
    """Discrete-event clock: time jumps to the next scheduled event.

    Events are totally ordered by ``(time, sequence id at scheduling)``, so a
    run with the same inputs always processes events in the same order.
    """

    virtual = True

    def __init__(self, start_ns: int = 0):
        self._now = start_ns
        self._queue: list[TimerHandle] = []
        self._seq = itertools.count()
        self.processed = 0

    def now_ns(self) -> int:
        return self._now

    def call_at(self, t_ns: int, fn: Callable[[], None]) -> TimerHandle:
        if t_ns < self._now:
            raise ValueError(f"cannot schedule in the past: {t_ns} < {self._now}")
        handle = TimerHandle(int(t_ns), next(self._seq), fn)
        heapq.heappush(self._queue, handle)
        return handle

    def call_later(self, delay_ns: int, fn: Callable[[], None]) -> TimerHandle:
        if delay_ns < 0:
            raise ValueError("negative delay")
        return self.call_at(self._now + delay_ns, fn)

    def pending(self) -> int:
        return sum(1 for h in self._queue if not h.cancelled)

    def next_time(self) -> int | None:
        while self._queue and self._queue[0].cancelled:
            heapq.heappop(self._queue)
        return self._queue[0].t_ns if self._queue else None

    def step(self) -> bool:
        """Run the next live event. Returns False when the queue is empty."""
        while self._queue:
            handle = heapq.heappop(self._queue)
            if handle.cancelled:
                continue
            assert handle.t_ns >= self._now
            self._now = handle.t_ns
            self.processed += 1
            handle.fn()
            return True
        return False

    idle = step

    def run(self, until_ns: int | None = None) -> None:
        while True:
            nxt = self.next_time()
            if nxt is None or (until_ns is not None and nxt > until_ns):
                break
            self.step()
        if until_ns is not None and until_ns > self._now:
            self._now = until_ns


Clock = Union[WallClock, VirtualClock]
