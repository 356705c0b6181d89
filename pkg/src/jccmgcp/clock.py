"""Single-threaded event reactor with a virtual or a real clock.

Everything in a topology (transports, transactions, services, simulators)
schedules work here. In virtual mode time jumps straight to the next due
timer, which makes runs reproducible; in real mode the loop sleeps (or waits
on registered sockets) until the next timer is due.
"""

from __future__ import annotations

import heapq
import itertools
import selectors
import time
from typing import Callable


class Timer:
    __slots__ = ("when", "callback", "cancelled")

    def __init__(self, when: float, callback: Callable[[], None]):
        self.when = when
        self.callback = callback
        self.cancelled = False

    def cancel(self) -> None:
        self.cancelled = True


class Reactor:
    def __init__(self, clock: str = "virtual"):
        if clock not in ("virtual", "real"):
            raise ValueError(f"unknown clock {clock!r}")
        self.clock = clock
        self._heap: list[tuple[float, int, Timer]] = []
        self._seq = itertools.count()
        self._virtual_now = 0.0
        self._epoch = time.monotonic()
        self._selector = selectors.DefaultSelector() if clock == "real" else None
        self._stopped = False

    def now(self) -> float:
        if self.clock == "virtual":
            return self._virtual_now
        return time.monotonic() - self._epoch

    def call_at(self, when: float, callback: Callable[[], None]) -> Timer:
        timer = Timer(when, callback)
        heapq.heappush(self._heap, (when, next(self._seq), timer))
        return timer

    def call_later(self, delay: float, callback: Callable[[], None]) -> Timer:
        return self.call_at(self.now() + max(0.0, delay), callback)

    def call_soon(self, callback: Callable[[], None]) -> Timer:
        return self.call_at(self.now(), callback)

    def add_reader(self, sock, callback: Callable[[], None]) -> None:
        if self._selector is None:
            raise RuntimeError("sockets need the real clock")
        self._selector.register(sock, selectors.EVENT_READ, callback)

    def remove_reader(self, sock) -> None:
        if self._selector is not None:
            self._selector.unregister(sock)

    def stop(self) -> None:
        self._stopped = True

    def pending(self) -> int:
        return sum(1 for _, _, t in self._heap if not t.cancelled)

    def _pop_due(self, now: float) -> Timer | None:
        while self._heap:
            when, _, timer = self._heap[0]
            if timer.cancelled:
                heapq.heappop(self._heap)
                continue
            if when <= now:
                heapq.heappop(self._heap)
                return timer
            return None
        return None

    def _next_when(self) -> float | None:
        while self._heap and self._heap[0][2].cancelled:
            heapq.heappop(self._heap)
        return self._heap[0][0] if self._heap else None

    def run_until(self, deadline: float | None = None, until: Callable[[], bool] | None = None) -> None:
        """Run timers (and socket reads) until ``deadline``, ``until()`` or idle.

        With no deadline in virtual mode the loop stops once no timers remain.
        """
        self._stopped = False
        while not self._stopped:
            if until is not None and until():
                return
            if self.clock == "virtual":
                nxt = self._next_when()
                if nxt is None or (deadline is not None and nxt > deadline):
                    if deadline is not None:
                        self._virtual_now = max(self._virtual_now, deadline)
                    return
                self._virtual_now = max(self._virtual_now, nxt)
                timer = self._pop_due(self._virtual_now)
                if timer is not None:
                    timer.callback()
                continue

            now = self.now()
            if deadline is not None and now >= deadline:
                return
            timer = self._pop_due(now)
            if timer is not None:
                timer.callback()
                continue
            nxt = self._next_when()
            wait = 0.05 if nxt is None else max(0.0, nxt - now)
            if deadline is not None:
                wait = min(wait, max(0.0, deadline - now))
            if nxt is None and deadline is None and not self._selector.get_map():
                return
            self._poll(wait)

    def _poll(self, wait: float) -> None:
        assert self._selector is not None
        if self._selector.get_map():
            for key, _ in self._selector.select(wait):
                key.data()
        elif wait > 0:
            time.sleep(wait)

    def close(self) -> None:
        if self._selector is not None:
            self._selector.close()
