"""Online fault recovery: local, remote (IPI kick-start) and a reboot baseline."""

from __future__ import annotations

import random
from dataclasses import dataclass, field
from enum import Enum
from typing import Optional

from .devices import DriverState
from .engine import EventKind, SimTime
from .errors import SimError
from .interrupts import BROADCAST_ALL, Ipi, send_ipi
from .sandbox import (ExitReason, MonitorAction, MonitorPolicy, SandboxState,
                      monitor_handle)

RECOVERY_IPI_VECTOR = 0xF0


class FaultMode(str, Enum):
    LOCAL = "local"
    REMOTE = "remote"
    REBOOT = "reboot"


_POLICY_FOR = {
    FaultMode.LOCAL: MonitorPolicy.LOCAL,
    FaultMode.REMOTE: MonitorPolicy.REMOTE,
    FaultMode.REBOOT: MonitorPolicy.HALT,
}


@dataclass
class FaultSpec:
    at: SimTime
    sandbox: int
    component: str
    blast: list = field(default_factory=list)     # (gpa, bytes) pairs
    mode: FaultMode = FaultMode.LOCAL

    def __post_init__(self):
        self.mode = FaultMode(self.mode)
        if self.at < 0:
            raise ValueError("fault time must be non-negative")
        if not self.component.endswith(f"@{self.sandbox}"):
            raise ValueError(f"component {self.component} does not belong to sandbox {self.sandbox}")


class TargetSelection(str, Enum):
    RANDOM = "random"
    ROUND_ROBIN = "round-robin"
    LEAST_LOADED = "least-loaded"


@dataclass
class RecoveryPolicy:
    target_selection: TargetSelection = TargetSelection.ROUND_ROBIN
    diversity: bool = True
    rr_pointer: Optional[int] = None

    def __post_init__(self):
        self.target_selection = TargetSelection(self.target_selection)


def select_target(policy: RecoveryPolicy, candidates, loads=None,
                  rng: random.Random | None = None) -> int:
    cands = sorted(candidates)
    if not cands:
        raise ValueError("no candidate sandbox")
    sel = policy.target_selection
    if sel is TargetSelection.RANDOM:
        return (rng or random.Random(0)).choice(cands)
    if sel is TargetSelection.LEAST_LOADED:
        loads = loads or {}
        return min(cands, key=lambda c: (loads.get(c, 0), c))
    after = [c for c in cands if policy.rr_pointer is None or c > policy.rr_pointer]
    pick = after[0] if after else cands[0]
    policy.rr_pointer = pick
    return pick


@dataclass(frozen=True)
class HandoffDescriptor:
    """What the faulty sandbox's monitor tells the target's monitor."""

    device: str
    vector: int
    channels: tuple = ()

    @property
    def tag(self) -> str:
        return f"{self.device}/v{self.vector}"


@dataclass
class RecoveryReport:
    mode: FaultMode
    sandbox: int
    target: Optional[int] = None
    fault_at: SimTime = 0
    healthy_at: Optional[SimTime] = None
    exit_reason: Optional[ExitReason] = None
    phases: list = field(default_factory=list)
    violations: int = 0
    restored_channels: list = field(default_factory=list)
    missed_icmp: int = 0
    snapshots: dict = field(default_factory=dict)

    @property
    def downtime(self) -> Optional[SimTime]:
        return None if self.healthy_at is None else self.healthy_at - self.fault_at

    @property
    def phase_total(self) -> int:
        return sum(c for _, c in self.phases)

    def to_dict(self) -> dict:
        return {
            "mode": self.mode.value,
            "sandbox": self.sandbox,
            "target": self.target,
            "fault_at_cycles": self.fault_at,
            "healthy_at_cycles": self.healthy_at,
            "exit_reason": self.exit_reason.value if self.exit_reason else None,
            "phases": [{"name": n, "cycles": c} for n, c in self.phases],
            "downtime_cycles": self.downtime,
            "missed_icmp": self.missed_icmp,
            "violations": self.violations,
            "restored_channels": list(self.restored_channels),
        }


class RecoveryManager:
    """Takes over monitor trap handling for a machine."""

    def __init__(self, machine, policy: RecoveryPolicy | None = None):
        self.m = machine
        self.policy = policy or RecoveryPolicy()
        self.active: dict[int, tuple[FaultSpec, RecoveryReport, list]] = {}
        self.reports: list[RecoveryReport] = []
        machine.trap_handler = self.on_trap

    # -- helpers ----------------------------------------------------------

    def _phase(self, report: RecoveryReport, sid: int, name: str, cycles: int) -> None:
        report.phases.append((name, cycles))
        self.m.engine.record(sid, "recovery_phase", origin=report.sandbox, phase=name,
                             cycles=cycles)

    def snapshot(self) -> dict:
        return {sid: {"kernel": self.m.kernel_digest(sid), "monitor": self.m.monitor_digest(sid)}
                for sid in sorted(self.m.sandboxes)}

    def _damaged_channels(self, sid: int, written) -> list:
        out = []
        for chan in self.m.ipc.channels.values():
            if sid not in chan.endpoints or not chan.alive:
                continue
            lo, hi = chan.buffer_gpa, chan.buffer_gpa + 4096
            if any(gpa < hi and gpa + n > lo for gpa, n in written):
                out.append(chan)
        return out

    def _restore(self, report: RecoveryReport, damaged) -> None:
        for chan in damaged:
            self.m.ipc.restore(chan)
            report.restored_channels.append(chan.id)

    # -- fault intake -----------------------------------------------------

    def inject_fault(self, spec: FaultSpec) -> None:
        self.m.engine.at(spec.at, lambda ev: self._activate(spec), EventKind.FAULT_INJECT,
                         str(spec.sandbox))

    def _activate(self, spec: FaultSpec) -> None:
        m = self.m
        sid = spec.sandbox
        sb = m.sandboxes[sid]
        if sb.state is not SandboxState.RUNNING or sid in self.active:
            m.engine.record(sid, "fault_skipped", component=spec.component, state=sb.state)
            return
        dev_id = spec.component.rsplit("@", 1)[0]
        inst = m.net.instance(dev_id, sid)
        if inst is None:
            raise SimError(f"unknown component {spec.component}")
        report = RecoveryReport(spec.mode, sid, fault_at=m.engine.now)
        report.snapshots["before"] = self.snapshot()
        m.monitors[sid].recovery_policy = _POLICY_FOR[spec.mode]
        m.engine.record(sid, "fault_inject", component=spec.component, mode=spec.mode,
                        writes=len(spec.blast))
        violations, written = m.net.corrupt_driver(inst, spec.blast)
        report.snapshots["after_blast"] = self.snapshot()
        report.violations = len(violations)
        self.active[sid] = (spec, report, self._damaged_channels(sid, written))
        self.reports.append(report)
        if violations:
            report.exit_reason = ExitReason.EPT_VIOLATION
            m.trap(sid, ExitReason.EPT_VIOLATION, violations[0])
        else:
            report.exit_reason = ExitReason.FORCED
            m.trap(sid, ExitReason.FORCED)

    def on_trap(self, sid: int) -> None:
        m = self.m
        mon = m.monitors[sid]
        entry = self.active.get(sid)
        if entry is None:
            monitor_handle(mon, m.engine, attributed=False)
            m.sandboxes[sid].halt()
            return
        spec, report, damaged = entry
        self._phase(report, sid, "vm_exit", m.costs.vm_exit)
        action = monitor_handle(mon, m.engine, attributed=True)
        m.net.release_locks_of(sid)
        if action is MonitorAction.REMOTE_RECOVER:
            self._remote(spec, report, damaged)
        elif action is MonitorAction.LOCAL_RECOVER:
            self._local(spec, report, damaged)
        else:
            self._reboot(spec, report, damaged)

    # -- local ------------------------------------------------------------

    def _local(self, spec, report, damaged) -> None:
        m = self.m
        sid = spec.sandbox
        sb = m.sandboxes[sid]
        inst = m.net.instance(spec.component.rsplit("@", 1)[0], sid)
        report.target = sid
        sb.begin_recovery()

        def enter():
            self._phase(report, sid, "vm_enter", m.costs.vm_enter)
            sb.vm_enter(then=reinit)

        def reinit():
            m.net.driver_reinit(inst, then=lambda: self._healthy(spec, report, damaged, sid),
                                on_phase=lambda n, c: self._phase(report, inst.sandbox, n, c))

        if self.policy.diversity:
            self._phase(report, sid, "driver_switch", m.costs.driver_switch)
            m.net.switch_implementation(inst)
            m.engine.after(m.costs.driver_switch, lambda ev: enter(), EventKind.TIMER,
                           f"monitor{sid}")
        else:
            enter()

    # -- remote -----------------------------------------------------------

    def _remote(self, spec, report, damaged) -> None:
        m = self.m
        sid = spec.sandbox
        cands = [s for s, sb in m.sandboxes.items()
                 if s != sid and sb.state is SandboxState.RUNNING and s not in self.active]
        if not cands:
            m.engine.record(sid, "recovery_fallback", reason="no-candidate")
            report.mode = FaultMode.LOCAL
            self._local(spec, report, damaged)
            return
        loads = {c: m.load(c) for c in cands}
        target = select_target(self.policy, cands, loads, m.engine.rng)
        report.target = target
        dev_id = spec.component.rsplit("@", 1)[0]
        dev = m.net.devices[dev_id]
        origin = m.sandboxes[sid]
        tgt = m.sandboxes[target]
        origin.begin_recovery()
        m.engine.record(sid, "recovery_target", target=target, policy=self.policy.target_selection)
        self._phase(report, sid, "ipi_round_trip", m.costs.ipi_round_trip)
        state = {}
        descriptor = HandoffDescriptor(dev_id, dev.vector, tuple(c.id for c in damaged))

        def delivered(ipi):
            # target kernel is parked in its monitor for the hand-off
            tgt.vm_exit(ExitReason.IPI, charge=False)
            tmon = m.monitors[target]
            state["grant"] = m.apic.grant(tmon.token, target, dev.vector)

        def acked(ipi):
            self._phase(report, target, "vm_enter", m.costs.vm_enter)
            tgt.vm_enter(then=take_over)
            # the origin heals in the background
            self._restore(report, damaged)
            origin.vm_enter(then=heal_origin)

        def take_over():
            entry = m.apic.table.get(dev.vector)
            if entry is not None and entry.destinations != BROADCAST_ALL:
                dests = (set(entry.destinations) - {sid}) | {target}
                m.apic.redirect(dev.vector, dests, state["grant"])
            for ip in m.net.local_ips(dev_id, sid):
                m.net.move_vif(dev_id, ip, target)
            inst = m.net.instance(dev_id, target)
            if inst is None:
                inst = m.net.attach(dev_id, target, state=DriverState.DETACHED)
            elif inst.healthy:
                inst.state = DriverState.DETACHED
            m.net.driver_reinit(inst, then=lambda: self._healthy(spec, report, [], target),
                                on_phase=lambda n, c: self._phase(report, inst.sandbox, n, c))

        def heal_origin():
            old = m.net.instance(dev_id, sid)
            if old is not None and old.state is DriverState.CORRUPTED:
                m.net.driver_reinit(old, then=lambda: m.engine.record(sid, "origin_healed",
                                                                      driver=old.id))

        send_ipi(m.engine, Ipi(sid, target, RECOVERY_IPI_VECTOR, descriptor),
                 m.costs.ipi_round_trip, tgt.state is SandboxState.RUNNING,
                 on_deliver=delivered, on_ack=acked)

    # -- reboot baseline --------------------------------------------------

    def _reboot(self, spec, report, damaged) -> None:
        m = self.m
        sid = spec.sandbox
        sb = m.sandboxes[sid]
        report.target = sid
        self._phase(report, sid, "reboot", m.costs.reboot)
        sb.halt()
        inst = m.net.instance(spec.component.rsplit("@", 1)[0], sid)

        def boot(ev):
            sb.launch()
            inst.state = DriverState.HEALTHY
            inst.generation += 1
            m.net._write_private(inst)
            self._healthy(spec, report, damaged, sid)

        m.engine.after(m.costs.reboot, boot, EventKind.TIMER, f"reboot{sid}")

    # -- completion -------------------------------------------------------

    def _healthy(self, spec, report, damaged, server: int) -> None:
        m = self.m
        self._restore(report, damaged)
        report.healthy_at = m.engine.now
        report.snapshots["after_recovery"] = self.snapshot()
        m.engine.record(server, "service_healthy", origin=spec.sandbox, downtime=report.downtime)
        m.engine.record(spec.sandbox, "recovery_done", mode=report.mode, target=report.target,
                        downtime=report.downtime, phases=len(report.phases),
                        phase_total=report.phase_total)
        self.active.pop(spec.sandbox, None)
