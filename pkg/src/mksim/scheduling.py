"""VCPU scheduling: sporadic-server Main VCPUs, I/O VCPUs, per-PCPU dispatch.

Main VCPUs carry a budget ``c_max`` per ``period`` and run at a fixed
rate-monotonic priority while they have budget. Once the budget is gone they
drop into a shared background band that only runs when no budgeted VCPU is
runnable. I/O VCPUs have a fixed bandwidth and borrow the priority of whoever
is waiting on them.

The :class:`PcpuScheduler` is event driven: it re-decides only when work
arrives or completes, a budget runs out, or a replenishment lands.
"""

from __future__ import annotations

import math
from collections import deque
from dataclasses import dataclass, field
from enum import Enum
from fractions import Fraction
from typing import Callable, Optional

from .engine import Engine, EventKind, SimTime
from .errors import BudgetInvariantError

BACKGROUND_FLOOR = 1 << 20


class ReplenishPolicy(str, Enum):
    # Each contiguous foreground run [f, t) comes back at f + period.
    # Guarantees at most c_max of foreground time in every sliding window.
    SLIDING = "sliding"
    # Consumption is coalesced per activation and returned at
    # activation_start + period.
    ACTIVATION = "activation"


@dataclass
class Replenishment:
    at: SimTime
    amount: SimTime


@dataclass
class WorkItem:
    vcpu: "Vcpu"
    remaining: Optional[SimTime]       # None means spin until converted
    on_done: Optional[Callable[[], None]] = None
    label: str = ""
    initiator: Optional[int] = None    # priority of the requesting Main VCPU
    cancelled: bool = False


class Vcpu:
    """Budgeted server shared by Main and I/O VCPUs."""

    kind = "vcpu"

    def __init__(self, id: int, c_max: SimTime, period: SimTime, pcpu: int = 0,
                 policy: ReplenishPolicy = ReplenishPolicy.SLIDING):
        if not 0 < c_max <= period:
            raise ValueError(f"vcpu {id}: need 0 < c_max ({c_max}) <= period ({period})")
        self.id = id
        self.c_max = c_max
        self.period = period
        self.pcpu = pcpu
        self.policy = ReplenishPolicy(policy)
        self.budget = c_max
        self.replenishments: list[Replenishment] = []
        self.pending = 0                 # sum of replenishment amounts
        self.work: deque[WorkItem] = deque()
        self.activation_start: Optional[SimTime] = None
        self._run_start: Optional[SimTime] = None
        self._run_end: Optional[SimTime] = None

    @property
    def utilization(self) -> Fraction:
        return Fraction(self.c_max, self.period)

    @property
    def priority(self) -> int:
        raise NotImplementedError

    @property
    def runnable(self) -> bool:
        return bool(self.work)

    def pending_amount(self) -> SimTime:
        return sum(r.amount for r in self.replenishments)

    def check_conservation(self):
        if self.budget + self.pending != self.c_max:
            raise BudgetInvariantError(
                f"vcpu {self.id}: budget {self.budget} + pending {self.pending_amount()} != {self.c_max}")

    def account(self, ran_from: SimTime, ran_to: SimTime) -> None:
        """Charge a foreground run and post its replenishment."""
        if ran_to <= ran_from:
            raise BudgetInvariantError(f"vcpu {self.id}: empty run [{ran_from}, {ran_to})")
        amount = ran_to - ran_from
        if amount > self.budget:
            raise BudgetInvariantError(
                f"vcpu {self.id}: charged {amount} with only {self.budget} left")
        self.budget -= amount
        self.pending += amount
        if self.policy is ReplenishPolicy.ACTIVATION:
            start = self.activation_start
            if start is None or start + self.period <= ran_from:
                start = self.activation_start = ran_from
            at = start + self.period
        else:
            if self._run_end == ran_from and self._run_start is not None:
                start = self._run_start
            else:
                start = ran_from
            self._run_start, self._run_end = start, ran_to
            at = start + self.period
        last = self.replenishments[-1] if self.replenishments else None
        if last is not None and last.at == at:
            last.amount += amount
        else:
            self.replenishments.append(Replenishment(at, amount))

    def replenish(self, now: SimTime) -> SimTime:
        """Apply every replenishment due at or before ``now``."""
        got = 0
        reps = self.replenishments
        while reps and reps[0].at <= now:
            got += reps.pop(0).amount
        if got:
            self.budget += got
            self.pending -= got
        return got

    def next_replenishment(self) -> Optional[SimTime]:
        return self.replenishments[0].at if self.replenishments else None


class MainVcpu(Vcpu):
    kind = "main"

    def __init__(self, id, c_max, period, pcpu=0, fg_priority=0,
                 policy=ReplenishPolicy.SLIDING, bound_threads=None):
        super().__init__(id, c_max, period, pcpu, policy)
        self.fg_priority = fg_priority
        self.bound_threads = list(bound_threads or [])

    @property
    def priority(self) -> int:
        return self.fg_priority

    def __repr__(self):
        return f"MainVcpu(id={self.id}, c_max={self.c_max}, period={self.period}, prio={self.fg_priority})"


class IoVcpu(Vcpu):
    kind = "io"

    def __init__(self, id, bandwidth, enforcement_period, device=None, pcpu=0,
                 policy=ReplenishPolicy.SLIDING, background_floor=BACKGROUND_FLOOR):
        bandwidth = Fraction(bandwidth).limit_denominator(10**6)
        if not 0 < bandwidth <= 1:
            raise ValueError("I/O VCPU bandwidth must be in (0, 1]")
        c_max = max(1, math.floor(bandwidth * enforcement_period))
        super().__init__(id, c_max, enforcement_period, pcpu, policy)
        self.bandwidth = bandwidth
        self.enforcement_period = enforcement_period
        self.device = device
        self.background_floor = background_floor
        self.pending_initiators: list[int] = []

    @property
    def current_priority(self) -> int:
        return min(self.pending_initiators, default=self.background_floor)

    @property
    def priority(self) -> int:
        return self.current_priority

    def release(self, priority: Optional[int]) -> None:
        if priority is not None and priority in self.pending_initiators:
            self.pending_initiators.remove(priority)

    def __repr__(self):
        return f"IoVcpu(id={self.id}, bandwidth={self.bandwidth}, period={self.enforcement_period})"


def io_inherit(io: IoVcpu, initiator: Optional[MainVcpu]) -> int:
    """Register ``initiator`` as waiting on ``io``; returns the new priority.

    With several initiators pending the I/O VCPU serves at the highest of
    their priorities. With none it sits at the background floor.
    """
    if initiator is not None:
        io.pending_initiators.append(initiator.fg_priority)
    return io.current_priority


def account(vcpu: Vcpu, ran_from: SimTime, ran_to: SimTime) -> None:
    vcpu.account(ran_from, ran_to)


def rms_assign(vcpus: list[Vcpu], apply: bool = True) -> list[int]:
    """Rate-monotonic priorities (0 is highest), returned in input order."""
    if not vcpus:
        raise ValueError("rms_assign needs at least one VCPU")
    order = sorted(range(len(vcpus)), key=lambda i: (vcpus[i].period, vcpus[i].id))
    prios = [0] * len(vcpus)
    for rank, i in enumerate(order):
        prios[i] = rank
    if apply:
        for v, p in zip(vcpus, prios):
            if isinstance(v, MainVcpu):
                v.fg_priority = p
    return prios


def liu_layland_bound(n: int) -> float:
    return n * (2 ** (1 / n) - 1)


@dataclass(frozen=True)
class AdmissionReport:
    accepted: bool
    total_utilization: float
    bound: float
    n: int

    def __str__(self):
        verdict = "accept" if self.accepted else "reject"
        return f"{verdict}: sum(U)={self.total_utilization:.4f} bound={self.bound:.4f} n={self.n}"


def admit(vcpus: list[Vcpu]) -> AdmissionReport:
    """Liu and Layland utilization test for the VCPUs sharing one PCPU."""
    n = len(vcpus)
    if n == 0:
        return AdmissionReport(True, 0.0, 1.0, 0)
    total = sum(v.utilization for v in vcpus)
    bound = liu_layland_bound(n)
    # Fractions keep 0.26 * 3 from drifting; the bound is irrational anyway.
    return AdmissionReport(float(total) <= bound + 1e-12, float(total), bound, n)


class PcpuScheduler:
    """Preemptive fixed-priority dispatcher for the VCPUs on one PCPU."""

    def __init__(self, engine: Engine, pcpu: int, owner=None,
                 background_floor: int = BACKGROUND_FLOOR, trace: bool = True):
        self.engine = engine
        self.pcpu = pcpu
        self.owner = pcpu if owner is None else owner
        self.background_floor = background_floor
        self.trace = trace
        self.vcpus: list[Vcpu] = []
        self.running: Optional[Vcpu] = None
        self.band: Optional[str] = None
        self.since: SimTime = 0
        self.suspended = False
        self._timer: Optional[int] = None
        self._timer_at: Optional[SimTime] = None
        self._busy = False
        self._dirty = False
        self._pending_done: list[WorkItem] = []
        self._run_from: SimTime = 0
        self._activation = False
        self._label = f"pcpu{pcpu}"

    def add(self, vcpu: Vcpu) -> Vcpu:
        vcpu.pcpu = self.pcpu
        if isinstance(vcpu, IoVcpu):
            vcpu.background_floor = self.background_floor
        self.vcpus.append(vcpu)
        self.vcpus.sort(key=lambda v: v.id)
        self._activation = any(v.policy is ReplenishPolicy.ACTIVATION for v in self.vcpus)
        return vcpu

    def get(self, vcpu_id: int) -> Vcpu:
        for v in self.vcpus:
            if v.id == vcpu_id:
                return v
        raise KeyError(vcpu_id)

    # -- work submission --------------------------------------------------

    def submit(self, vcpu: Vcpu, cycles: Optional[SimTime], on_done=None,
               label: str = "", initiator: Optional[MainVcpu] = None) -> WorkItem:
        if cycles is not None and cycles < 0:
            raise ValueError("negative work")
        prio = None
        if isinstance(vcpu, IoVcpu) and initiator is not None:
            io_inherit(vcpu, initiator)
            prio = initiator.fg_priority
        item = WorkItem(vcpu, cycles, on_done, label, prio)
        vcpu.work.append(item)
        self.kick()
        return item

    def finish_spin(self, item: WorkItem, cycles: SimTime) -> None:
        """Turn a spinning item into one that completes after ``cycles`` more."""
        self._charge(self.engine.now)
        item.remaining = cycles
        self.kick()

    def cancel(self, item: WorkItem) -> None:
        self._charge(self.engine.now)
        item.cancelled = True
        if item in item.vcpu.work:
            item.vcpu.work.remove(item)
            if isinstance(item.vcpu, IoVcpu):
                item.vcpu.release(item.initiator)
        self.kick()

    def drop_work(self, vcpu: Vcpu, predicate=lambda item: True) -> int:
        self._charge(self.engine.now)
        victims = [w for w in vcpu.work if predicate(w)]
        for w in victims:
            w.cancelled = True
            vcpu.work.remove(w)
            if isinstance(vcpu, IoVcpu):
                vcpu.release(w.initiator)
        self.kick()
        return len(victims)

    def suspend(self):
        self.suspended = True
        self.kick()

    def resume(self):
        self.suspended = False
        self.kick()

    # -- core -------------------------------------------------------------

    def _charge(self, now: SimTime) -> list[WorkItem]:
        """Bill the running VCPU for [since, now) and collect finished items."""
        done = []
        v = self.running
        elapsed = now - self.since
        if v is not None and elapsed > 0:
            if self.band == "fg":
                v.account(self.since, now)
            left = elapsed
            while left > 0 and v.work:
                item = v.work[0]
                if item.remaining is None:
                    break
                step = min(left, item.remaining)
                item.remaining -= step
                left -= step
                if item.remaining == 0:
                    done.append(v.work.popleft())
        if v is not None:
            # zero-length items finish without consuming time
            while v.work and v.work[0].remaining == 0:
                done.append(v.work.popleft())
        self.since = now
        self._pending_done.extend(done)
        return done

    def kick(self) -> None:
        if self._busy:
            self._dirty = True
            return
        self._busy = True
        engine = self.engine
        vcpus = self.vcpus
        try:
            while True:
                self._dirty = False
                now = engine.now
                self._charge(now)
                running = self.running
                done = self._pending_done
                for v in vcpus:
                    w = v.work
                    if w and v is not running and w[0].remaining == 0:
                        done.append(w.popleft())
                if done:
                    self._pending_done = []
                    for item in done:
                        if item.initiator is not None:
                            item.vcpu.release(item.initiator)
                        if item.on_done is not None and not item.cancelled:
                            item.on_done()
                    if self._dirty:
                        continue
                for v in vcpus:
                    reps = v.replenishments
                    if not reps or reps[0].at > now:
                        continue
                    was_zero = v.budget == 0
                    got = v.replenish(now)
                    if self.trace:
                        engine.record(self.owner, "replenish", vcpu=v.id, amount=got, budget=v.budget)
                    if was_zero and v.work and v.policy is ReplenishPolicy.ACTIVATION:
                        v.activation_start = now
                    v.check_conservation()
                choice, band = (None, None) if self.suspended else pick_next(self, now)
                if choice is not self.running or band != self.band:
                    self._switch(choice, band, now)
                if self._activation:
                    for v in vcpus:
                        if v.policy is ReplenishPolicy.ACTIVATION:
                            if not v.work or v.budget == 0:
                                v.activation_start = None
                            elif v.activation_start is None:
                                v.activation_start = now
                if not self._dirty:
                    break
            self._arm(now)
        finally:
            self._busy = False

    def _switch(self, choice, band, now):
        prev, prev_band = self.running, self.band
        if choice is prev and band == prev_band:
            return
        if prev is not None:
            if prev_band == "fg" and prev.budget == 0 and self.trace:
                self.engine.record(self.owner, "budget_exhausted", vcpu=prev.id)
            if self.trace:
                self.engine.record(self.owner, "vcpu_preempt", vcpu=prev.id, band=prev_band,
                                   ran_from=self._run_from, ran_to=now)
        self.running, self.band = choice, band
        self._run_from = now
        if choice is not None and self.trace:
            self.engine.record(self.owner, "vcpu_dispatch", vcpu=choice.id, band=band,
                               budget=choice.budget)

    def _arm(self, now: SimTime) -> None:
        nxt = None
        v = self.running
        if v is not None:
            w = v.work
            if w and w[0].remaining is not None:
                nxt = now + w[0].remaining
            if self.band == "fg":
                t = now + v.budget
                if nxt is None or t < nxt:
                    nxt = t
        for u in self.vcpus:
            if u.work and u.replenishments:
                t = u.replenishments[0].at
                if nxt is None or t < nxt:
                    nxt = t
        if nxt is not None and nxt < now:
            nxt = now
        if nxt == self._timer_at and self._timer is not None:
            return
        if self._timer is not None:
            self.engine.cancel(self._timer)
            self._timer = None
            self._timer_at = None
        if nxt is not None:
            self._timer = self.engine.at(nxt, self._on_timer, EventKind.TIMER, self._label)
            self._timer_at = nxt

    def _on_timer(self, event) -> None:
        self._timer = None
        self._timer_at = None
        self.kick()


def pick_next(sched: PcpuScheduler, now: SimTime):
    """Choose ``(vcpu, band)`` to run; ``(None, None)`` when idle.

    Runnable VCPUs with budget compete on priority; if none has budget the
    lowest-id runnable VCPU runs in the background band.
    """
    best, best_key = None, None
    for v in sched.vcpus:
        if not v.work:
            continue
        key = (0, v.priority, v.id) if v.budget > 0 else (1, sched.background_floor, v.id)
        if best_key is None or key < best_key:
            best, best_key = v, key
    if best is None:
        return None, None
    return best, ("fg" if best_key[0] == 0 else "bg")


class PeriodicTask:
    """Releases a job of ``cost`` cycles every ``period`` onto a VCPU.

    Deadlines are implicit (equal to the period). Misses are traced as
    ``deadline_miss``.
    """

    def __init__(self, sched: PcpuScheduler, vcpu: Vcpu, period: SimTime, cost: SimTime,
                 offset: SimTime = 0, until: Optional[SimTime] = None, name: str = ""):
        self.sched = sched
        self.vcpu = vcpu
        self.period = period
        self.cost = cost
        self.until = until
        self.name = name or f"task{vcpu.id}"
        self.released = 0
        self.completed = 0
        self.misses = 0
        self._outstanding: Optional[SimTime] = None
        sched.engine.at(offset, self._release, EventKind.WORKLOAD_STEP, self.name)

    def _release(self, event):
        eng = self.sched.engine
        now = eng.now
        if self._outstanding is not None:
            self.misses += 1
            eng.record(self.sched.owner, "deadline_miss", vcpu=self.vcpu.id, release=self._outstanding)
        release = now
        self._outstanding = release
        self.released += 1

        def done():
            finish = eng.now
            if self._outstanding == release:
                self._outstanding = None
                if finish > release + self.period:
                    self.misses += 1
                    eng.record(self.sched.owner, "deadline_miss", vcpu=self.vcpu.id, release=release)
            self.completed += 1
            eng.record(self.sched.owner, "job_done", vcpu=self.vcpu.id, release=release)

        self.sched.submit(self.vcpu, self.cost, done, label=self.name)
        nxt = now + self.period
        if self.until is None or nxt < self.until:
            eng.at(nxt, self._release, EventKind.WORKLOAD_STEP, self.name)
