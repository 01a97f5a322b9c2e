"""Execution substrate: injected clocks, schedulers, and futures.

All kernel code takes its notion of time and deferral from an Executor so
the same logic runs under the virtual-time simulator and under a real
thread.  Nothing in the kernel may call time.time() directly.
"""

from __future__ import annotations

import heapq
import logging
import threading
import time
from typing import Any, Callable, Optional

log = logging.getLogger(__name__)


class Timer:
    __slots__ = ("when", "seq", "fn", "args", "active")

    def __init__(self, when: int, seq: int, fn: Callable, args: tuple):
        self.when = when
        self.seq = seq
        self.fn = fn
        self.args = args
        self.active = True

    def cancel(self) -> None:
        self.active = False

    def __lt__(self, other: "Timer") -> bool:
        return (self.when, self.seq) < (other.when, other.seq)


class Executor:
    """Scheduling interface: integer milliseconds, FIFO within a timestamp."""

    def now_ms(self) -> int:
        raise NotImplementedError

    def call_at(self, when_ms: int, fn: Callable, *args: Any) -> Timer:
        raise NotImplementedError

    def call_later(self, delay_ms: int, fn: Callable, *args: Any) -> Timer:
        return self.call_at(self.now_ms() + max(0, int(delay_ms)), fn, *args)

    def post(self, fn: Callable, *args: Any) -> Timer:
        return self.call_at(self.now_ms(), fn, *args)


class SimExecutor(Executor):
    """Single logical executor with virtual time.

    Events run strictly in (timestamp, insertion order).  Callback
    exceptions propagate to the caller of step()/run_until() so broken
    scenarios fail loudly instead of diverging silently.
    """

    def __init__(self) -> None:
        self._heap: list[Timer] = []
        self._seq = 0
        self._now = 0

    def now_ms(self) -> int:
        return self._now

    def call_at(self, when_ms: int, fn: Callable, *args: Any) -> Timer:
        when = max(int(when_ms), self._now)
        self._seq += 1
        t = Timer(when, self._seq, fn, args)
        heapq.heappush(self._heap, t)
        return t

    def pending(self) -> int:
        return sum(1 for t in self._heap if t.active)

    def step(self) -> bool:
        while self._heap:
            t = heapq.heappop(self._heap)
            if not t.active:
                continue
            self._now = t.when
            t.fn(*t.args)
            return True
        return False

    def run_until(self, t_end_ms: int) -> None:
        while self._heap:
            head = self._heap[0]
            if not head.active:
                heapq.heappop(self._heap)
                continue
            if head.when > t_end_ms:
                break
            self.step()
        self._now = max(self._now, t_end_ms)

    def run_while(self, cond: Callable[[], bool], limit_ms: int) -> None:
        """Advance until cond() is false or virtual time passes the limit."""
        deadline = self._now + limit_ms
        while cond() and self._heap:
            head = self._heap[0]
            if not head.active:
                heapq.heappop(self._heap)
                continue
            if head.when > deadline:
                break
            self.step()


class ThreadExecutor(Executor):
    """Real-time executor: one worker thread drains a timer heap.

    Used by live TCP nodes and by the CLI client.  Callbacks run on the
    worker thread only; I/O threads hand work over via post().
    """

    def __init__(self, name: str = "dget-exec"):
        self._heap: list[Timer] = []
        self._seq = 0
        self._lock = threading.Lock()
        self._wakeup = threading.Condition(self._lock)
        self._stopped = False
        self._epoch = time.monotonic()
        self._thread = threading.Thread(target=self._loop, name=name, daemon=True)
        self._thread.start()

    def now_ms(self) -> int:
        return int((time.monotonic() - self._epoch) * 1000)

    def call_at(self, when_ms: int, fn: Callable, *args: Any) -> Timer:
        with self._wakeup:
            self._seq += 1
            t = Timer(int(when_ms), self._seq, fn, args)
            heapq.heappush(self._heap, t)
            self._wakeup.notify()
            return t

    def stop(self) -> None:
        with self._wakeup:
            self._stopped = True
            self._wakeup.notify()
        if threading.current_thread() is not self._thread:
            self._thread.join(timeout=5.0)

    def _loop(self) -> None:
        while True:
            with self._wakeup:
                if self._stopped:
                    return
                if not self._heap:
                    self._wakeup.wait(timeout=1.0)
                    continue
                head = self._heap[0]
                if not head.active:
                    heapq.heappop(self._heap)
                    continue
                delay = (head.when - self.now_ms()) / 1000.0
                if delay > 0:
                    self._wakeup.wait(timeout=min(delay, 1.0))
                    continue
                t = heapq.heappop(self._heap)
            if t.active:
                try:
                    t.fn(*t.args)
                except Exception:
                    log.exception("executor callback failed")


class Future:
    """Completion holder usable from the sim (polled) and threads (waited)."""

    __slots__ = ("_value", "_error", "done", "_cbs", "_event")

    def __init__(self) -> None:
        self._value: Any = None
        self._error: Optional[BaseException] = None
        self.done = False
        self._cbs: list[Callable[["Future"], None]] = []
        self._event = threading.Event()

    def ok(self, value: Any = None) -> None:
        if self.done:
            return
        self._value = value
        self._finish()

    def fail(self, error: BaseException) -> None:
        if self.done:
            return
        self._error = error
        self._finish()

    def _finish(self) -> None:
        self.done = True
        self._event.set()
        cbs, self._cbs = self._cbs, []
        for cb in cbs:
            cb(self)

    def on_done(self, cb: Callable[["Future"], None]) -> None:
        if self.done:
            cb(self)
        else:
            self._cbs.append(cb)

    def wait(self, timeout_s: Optional[float] = None) -> bool:
        return self._event.wait(timeout=timeout_s)

    @property
    def error(self) -> Optional[BaseException]:
        return self._error

    def result(self) -> Any:
        if not self.done:
            raise RuntimeError("future not resolved")
        if self._error is not None:
            raise self._error
        return self._value
