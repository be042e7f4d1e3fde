"""Injectable time sources.

Every component that sleeps or timestamps takes a clock, so tests can run
poll loops and mock timelines on virtual time instead of the wall clock.
"""

from __future__ import annotations

import heapq
import itertools
import os
import threading
import time
from datetime import datetime, timezone
from typing import Callable, Optional

# 2024-01-01T00:00:00Z; virtual clocks start here so timestamps are stable.
DEFAULT_EPOCH = 1704067200.0


class WallClock:
    def now(self) -> float:
        return time.time()

    def sleep(self, seconds: float, interrupt: Optional[threading.Event] = None) -> None:
        if seconds <= 0:
            return
        if interrupt is not None:
            interrupt.wait(seconds)
        else:
            time.sleep(seconds)


class ScaledClock:
    """Wall time sped up by ``1/scale``: ``sleep(1)`` takes ``scale`` real seconds.

    Usable across processes because it only depends on real time.
    """

    def __init__(self, scale: float, origin: Optional[float] = None):
        if scale <= 0:
            raise ValueError("scale must be positive")
        self.scale = scale
        self._origin = time.time() if origin is None else origin
        self._m0 = time.monotonic()

    def now(self) -> float:
        return self._origin + (time.monotonic() - self._m0) / self.scale

    def sleep(self, seconds: float, interrupt: Optional[threading.Event] = None) -> None:
        if seconds <= 0:
            return
        if interrupt is not None:
            interrupt.wait(seconds * self.scale)
        else:
            time.sleep(seconds * self.scale)


class VirtualClock:
    """Discrete-event clock: time moves only when someone sleeps or advances it.

    ``sleep`` returns immediately after moving time forward, firing any
    callbacks registered with :meth:`call_at` whose due time falls inside the
    slept interval (with ``now()`` set to the due time while each runs). A
    single-threaded run against this clock is fully reproducible.
    """

    def __init__(self, start: float = DEFAULT_EPOCH):
        self._now = start
        self._lock = threading.RLock()
        self._pending: list[tuple[float, int, Callable[[], None]]] = []
        self._seq = itertools.count()

    def now(self) -> float:
        with self._lock:
            return self._now

    def call_at(self, when: float, fn: Callable[[], None]) -> None:
        with self._lock:
            heapq.heappush(self._pending, (when, next(self._seq), fn))

    def call_later(self, delay: float, fn: Callable[[], None]) -> None:
        self.call_at(self.now() + delay, fn)

    def advance(self, seconds: float) -> None:
        with self._lock:
            target = self._now + max(0.0, seconds)
        while True:
            with self._lock:
                if not self._pending or self._pending[0][0] > target:
                    self._now = max(self._now, target)
                    return
                when, _, fn = heapq.heappop(self._pending)
                self._now = max(self._now, when)
            fn()

    def sleep(self, seconds: float, interrupt: Optional[threading.Event] = None) -> None:
        self.advance(seconds)


def clock_from_env(environ=None):
    """Wall clock unless ``BRIDGE_TIME_SCALE`` asks for a sped-up one."""
    environ = os.environ if environ is None else environ
    scale = environ.get("BRIDGE_TIME_SCALE", "")
    if scale and float(scale) != 1.0:
        return ScaledClock(float(scale))
    return WallClock()


def rfc3339(ts: float) -> str:
    dt = datetime.fromtimestamp(ts, tz=timezone.utc)
    if dt.microsecond:
        return dt.isoformat(timespec="milliseconds").replace("+00:00", "Z")
    return dt.strftime("%Y-%m-%dT%H:%M:%SZ")


def parse_rfc3339(value: str) -> float:
    return datetime.fromisoformat(value.replace("Z", "+00:00")).timestamp()
