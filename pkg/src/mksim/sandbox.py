"""Sandbox kernels, their monitors and the VM exit/entry cost model."""

from __future__ import annotations

import math
from dataclasses import dataclass, field, fields
from enum import Enum
from typing import Callable, Optional

from .engine import Engine, EventKind, SimTime
from .errors import StateError
from .memory import EptTable, EptViolation, MonitorToken
from .scheduling import PcpuScheduler


@dataclass(frozen=True)
class CostModel:
    """Cycle costs of the privileged transitions and recovery phases."""

    vm_exit: int = 707
    vm_enter: int = 823
    driver_switch: int = 12427
    ipi_round_trip: int = 1291
    driver_reinit: int = 134_244_605
    network_reinit: int = 68_750_060
    # Not a measured value: roughly a minute at 2 GHz.
    reboot: int = 120_000_000_000

    def __post_init__(self):
        for f in fields(self):
            if getattr(self, f.name) < 0:
                raise ValueError(f"cost {f.name} must be non-negative")

    @property
    def ipi_request(self) -> int:
        return math.ceil(self.ipi_round_trip / 2)

    @property
    def ipi_ack(self) -> int:
        return self.ipi_round_trip // 2

    def replace(self, **overrides) -> "CostModel":
        unknown = set(overrides) - {f.name for f in fields(self)}
        if unknown:
            raise ValueError(f"unknown cost fields: {sorted(unknown)}")
        return CostModel(**{**self.__dict__, **overrides})


class SandboxState(str, Enum):
    RUNNING = "running"
    TRAPPED = "trapped-to-monitor"
    RECOVERING = "recovering"
    HALTED = "halted"


class ExitReason(str, Enum):
    EPT_VIOLATION = "ept-violation"
    FORCED = "forced"
    PREEMPTION_TIMEOUT = "preemption-timeout"
    # Target of a recovery kick-start. The exit cost is inside the IPI
    # round trip, so it is not charged separately.
    IPI = "ipi"


class MonitorPolicy(str, Enum):
    LOCAL = "local"
    REMOTE = "remote"
    HALT = "halt"


class MonitorAction(str, Enum):
    LOCAL_RECOVER = "local-recover"
    REMOTE_RECOVER = "remote-recover"
    HALT = "halt"


@dataclass
class Sandbox:
    id: int
    pcpu: int
    engine: Engine
    scheduler: PcpuScheduler
    costs: CostModel = field(default_factory=CostModel)
    state: SandboxState = SandboxState.HALTED
    services: list = field(default_factory=list)
    drivers: list = field(default_factory=list)
    channels: list = field(default_factory=list)
    vm_exit_count: int = 0
    launches: int = 0
    time_trapped: int = 0
    _trapped_since: Optional[int] = None

    def __post_init__(self):
        self.scheduler.suspend()

    @property
    def running(self) -> bool:
        return self.state is SandboxState.RUNNING

    def launch(self) -> None:
        if self.state is not SandboxState.HALTED:
            raise StateError(f"sandbox {self.id} is {self.state.value}; only halted sandboxes launch")
        self.state = SandboxState.RUNNING
        self.launches += 1
        self.engine.record(self.id, "sandbox_launch", services="|".join(self.services),
                           launch=self.launches)
        self.scheduler.resume()

    def halt(self) -> None:
        if self.state is SandboxState.HALTED:
            return
        self._close_trap()
        self.state = SandboxState.HALTED
        self.scheduler.suspend()
        self.engine.record(self.id, "sandbox_halt")

    def vm_exit(self, reason: ExitReason, then: Callable | None = None,
                charge: bool = True) -> SimTime:
        """Trap into the monitor. Returns the cycle at which the monitor runs."""
        if self.state is not SandboxState.RUNNING:
            raise StateError(f"vm_exit on sandbox {self.id} in state {self.state.value}")
        reason = ExitReason(reason)
        cost = self.costs.vm_exit if charge else 0
        self.state = SandboxState.TRAPPED
        self.vm_exit_count += 1
        self._trapped_since = self.engine.now
        self.scheduler.suspend()
        self.engine.record(self.id, "vm_exit", reason=reason, cost=cost, count=self.vm_exit_count)
        when = self.engine.now + cost
        if then is not None:
            self.engine.at(when, lambda ev: then(), EventKind.VM_EXIT, f"monitor{self.id}")
        return when

    def begin_recovery(self) -> None:
        if self.state is not SandboxState.TRAPPED:
            raise StateError(f"sandbox {self.id} must be trapped to start recovery")
        self.state = SandboxState.RECOVERING

    def vm_enter(self, then: Callable | None = None) -> SimTime:
        """Resume the guest after the entry cost. Returns the resume cycle."""
        if self.state not in (SandboxState.TRAPPED, SandboxState.RECOVERING):
            raise StateError(f"vm_enter on sandbox {self.id} in state {self.state.value}")
        cost = self.costs.vm_enter
        when = self.engine.now + cost

        def resume(ev):
            self._close_trap()
            self.state = SandboxState.RUNNING
            self.engine.record(self.id, "vm_enter", cost=cost)
            self.scheduler.resume()
            if then is not None:
                then()

        self.engine.at(when, resume, EventKind.VM_ENTRY, str(self.id))
        return when

    def _close_trap(self):
        if self._trapped_since is not None:
            self.time_trapped += self.engine.now - self._trapped_since
            self._trapped_since = None


@dataclass
class Monitor:
    sandbox_id: int
    ept: EptTable
    token: MonitorToken
    recovery_policy: MonitorPolicy = MonitorPolicy.LOCAL
    pending_trap: Optional[EptViolation] = None
    trap_reason: Optional[ExitReason] = None
    actions: list = field(default_factory=list)


def monitor_handle(monitor: Monitor, engine: Engine, attributed: bool = True) -> MonitorAction:
    """Decide what to do with the pending trap.

    A trap with no faulting component on record cannot be repaired, so it
    halts the sandbox whatever the policy says.
    """
    if monitor.pending_trap is None and monitor.trap_reason is None:
        raise StateError(f"monitor {monitor.sandbox_id} has no pending trap")
    policy = MonitorPolicy(monitor.recovery_policy)
    if not attributed or policy is MonitorPolicy.HALT:
        action = MonitorAction.HALT
    elif policy is MonitorPolicy.REMOTE:
        action = MonitorAction.REMOTE_RECOVER
    else:
        action = MonitorAction.LOCAL_RECOVER
    monitor.actions.append(action)
    trap = monitor.pending_trap
    engine.record(monitor.sandbox_id, "monitor_decision", action=action,
                  policy=policy, attributed=attributed,
                  gpa=f"{trap.gpa:#x}" if trap else "-",
                  reason=trap.reason if trap else (monitor.trap_reason or "-"))
    monitor.pending_trap = None
    monitor.trap_reason = None
    return action
