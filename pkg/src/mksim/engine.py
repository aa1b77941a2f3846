"""Deterministic discrete-event engine.

Virtual time is counted in CPU cycles. Events are kept in a single heap and
dispatched in ``(at, id)`` order, so two events at the same cycle run in the
order they were scheduled. Handlers append :class:`TraceRecord` rows to the
engine's trace; every metric the simulator reports is derived from that log.
"""

from __future__ import annotations

import csv
import hashlib
import heapq
import io
import random
from dataclasses import dataclass, field
from decimal import Decimal
from enum import Enum
from typing import Any, Callable, Iterable, Optional

from .errors import PastEventError, TimeOverflowError

SimTime = int

MAX_TIME: SimTime = 2**64 - 1
DEFAULT_CYCLES_PER_SECOND = 2_000_000_000

TRACE_HEADER = ("time_cycles", "sandbox", "event_type", "detail")


class EventKind(str, Enum):
    TIMER = "timer"
    INTERRUPT = "interrupt"
    IPI = "ipi"
    VM_EXIT = "vm-exit"
    VM_ENTRY = "vm-entry"
    CHANNEL_POLL = "channel-poll"
    FAULT_INJECT = "fault-inject"
    WORKLOAD_STEP = "workload-step"


@dataclass(frozen=True)
class SimConfig:
    cycles_per_second: int = DEFAULT_CYCLES_PER_SECOND
    seed: int = 0
    horizon: SimTime = MAX_TIME

    def __post_init__(self):
        if self.cycles_per_second <= 0:
            raise ValueError("cycles_per_second must be positive")
        if self.horizon <= 0:
            raise ValueError("horizon must be positive")
        if not 0 <= self.seed < 2**64:
            raise ValueError("seed must be an unsigned 64-bit value")


def cycles_from_millis(ms, cfg: SimConfig) -> SimTime:
    """Convert milliseconds of wall time to cycles, rounding to nearest."""
    if ms < 0:
        raise ValueError("negative duration")
    # str() keeps 0.1 from turning into 0.1000000000000000055...
    cycles = round(Decimal(str(ms)) * cfg.cycles_per_second / 1000)
    if cycles > MAX_TIME:
        raise TimeOverflowError(f"{ms} ms does not fit in 64 bits of cycles")
    return int(cycles)


def millis_from_cycles(cycles: SimTime, cfg: SimConfig) -> float:
    return cycles * 1000 / cfg.cycles_per_second


@dataclass
class Event:
    at: SimTime
    kind: EventKind = EventKind.TIMER
    target: str = "host"
    action: Optional[Callable[["Event"], Any]] = None
    payload: dict = field(default_factory=dict)
    id: int = 0


@dataclass(frozen=True)
class TraceRecord:
    at: SimTime
    sandbox: str
    event_type: str
    detail: tuple = ()

    def get(self, key, default=None):
        for k, v in self.detail:
            if k == key:
                return v
        return default

    @property
    def details(self) -> dict:
        return dict(self.detail)

    def detail_text(self) -> str:
        return ";".join(f"{k}={v}" for k, v in self.detail)

    def row(self) -> tuple:
        return (self.at, self.sandbox, self.event_type, self.detail_text())


def parse_detail(text: str) -> tuple:
    if not text:
        return ()
    pairs = []
    for item in text.split(";"):
        k, _, v = item.partition("=")
        pairs.append((k, v))
    return tuple(pairs)


def _fmt(value) -> str:
    if isinstance(value, Enum):
        return str(value.value)
    if isinstance(value, bool):
        return "1" if value else "0"
    if isinstance(value, float):
        return repr(value)
    return str(value)


class Engine:
    """Single-timeline event loop with a seeded RNG and an append-only trace."""

    def __init__(self, config: SimConfig | None = None):
        self.config = config or SimConfig()
        self.now: SimTime = 0
        self.rng = random.Random(self.config.seed)
        self.trace: list[TraceRecord] = []
        self.dispatched = 0
        self._queue: list = []
        self._next_id = 1
        self._cancelled: set[int] = set()
        self._last_dispatch: SimTime = 0

    # -- scheduling -------------------------------------------------------

    def schedule(self, event: Event) -> int:
        if event.at < self.now:
            raise PastEventError(f"event at {event.at} is before now={self.now}")
        if event.at > MAX_TIME:
            raise TimeOverflowError(f"event time {event.at} overflows")
        event.id = self._next_id
        self._next_id += 1
        heapq.heappush(self._queue, (event.at, event.id, event))
        return event.id

    def at(self, when: SimTime, action: Callable | None = None,
           kind: EventKind = EventKind.TIMER, target: str = "host", **payload) -> int:
        return self.schedule(Event(when, kind, target, action, payload))

    def after(self, delay: SimTime, action: Callable | None = None,
              kind: EventKind = EventKind.TIMER, target: str = "host", **payload) -> int:
        return self.at(self.now + delay, action, kind, target, **payload)

    def cancel(self, event_id: int) -> None:
        self._cancelled.add(event_id)

    def pending(self) -> int:
        return len(self._queue) - sum(1 for _, i, _ in self._queue if i in self._cancelled)

    def next_time(self) -> SimTime | None:
        self._drop_cancelled_head()
        return self._queue[0][0] if self._queue else None

    # -- tracing ----------------------------------------------------------

    def record(self, sandbox, event_type: str, **detail) -> TraceRecord:
        rec = TraceRecord(
            self.now,
            "host" if sandbox is None else str(sandbox),
            event_type,
            tuple((k, _fmt(v)) for k, v in detail.items()),
        )
        self.trace.append(rec)
        return rec

    # -- running ----------------------------------------------------------

    def _drop_cancelled_head(self):
        q = self._queue
        while q and q[0][1] in self._cancelled:
            self._cancelled.discard(q[0][1])
            heapq.heappop(q)

    def step(self) -> bool:
        """Dispatch one event. Returns False when the queue is empty."""
        self._drop_cancelled_head()
        if not self._queue:
            return False
        at, _, event = heapq.heappop(self._queue)
        assert at >= self._last_dispatch, "causality violated"
        self.now = at
        self._last_dispatch = at
        self.dispatched += 1
        if event.action is not None:
            event.action(event)
        return True

    def run_until(self, t: SimTime) -> list[TraceRecord]:
        if t < self.now:
            raise PastEventError(f"cannot run back to {t} from {self.now}")
        start = len(self.trace)
        q = self._queue
        while True:
            self._drop_cancelled_head()
            if not q or q[0][0] > t:
                break
            self.step()
        self.now = t
        return self.trace[start:]

    def run(self, until: SimTime | None = None) -> list[TraceRecord]:
        """Run until the queue drains or the horizon (or ``until``) is reached."""
        limit = self.config.horizon if until is None else min(until, self.config.horizon)
        start = len(self.trace)
        q = self._queue
        while True:
            self._drop_cancelled_head()
            if not q or q[0][0] > limit:
                break
            self.step()
        return self.trace[start:]

    # -- export -----------------------------------------------------------

    def trace_csv(self) -> str:
        return trace_to_csv(self.trace)

    def trace_digest(self) -> str:
        return hashlib.sha256(self.trace_csv().encode()).hexdigest()


def trace_to_csv(records: Iterable[TraceRecord]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(TRACE_HEADER)
    for rec in records:
        w.writerow(rec.row())
    return buf.getvalue()


def read_trace_csv(text: str) -> list[TraceRecord]:
    rows = csv.reader(io.StringIO(text))
    header = next(rows)
    if tuple(header) != TRACE_HEADER:
        raise ValueError(f"unexpected trace header {header!r}")
    return [TraceRecord(int(t), sb, et, parse_detail(d)) for t, sb, et, d in rows]
