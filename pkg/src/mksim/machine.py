"""A whole simulated host: memory, sandboxes, monitors, schedulers, APIC."""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field
from typing import Optional

from .engine import Engine, EventKind, SimConfig
from .errors import StateError
from .interrupts import IoApic
from .memory import (Access, AccessResult, HostMemory, LayoutSizes, build_layout,
                     guest_access)
from .sandbox import CostModel, ExitReason, Monitor, Sandbox, SandboxState
from .scheduling import (AdmissionReport, IoVcpu, MainVcpu, PcpuScheduler,
                         ReplenishPolicy, admit, rms_assign)

# Bytes at the start of each kernel region filled with a seeded pattern so
# byte-compare checks have something to compare.
KERNEL_DATA_BYTES = 64 * 1024


@dataclass
class Params:
    """Plumbing constants that the measured system does not pin down."""

    delivery_latency: int = 100
    demux_cost: int = 200
    icmp_service: int = 5000
    lock_spin: int = 100
    copy_rate: int = 8            # bytes per cycle
    poll_cost: int = 50
    syscall_fork: int = 30_000
    syscall_wait: int = 12_000
    preemption_timeout: Optional[int] = None
    replenish_policy: str = ReplenishPolicy.SLIDING.value
    trace_sched: bool = True
    trace_chunks: bool = True


class Machine:
    def __init__(self, n_sandboxes: int = 4, sim: SimConfig | None = None,
                 costs: CostModel | None = None, params: Params | None = None,
                 layout: LayoutSizes | None = None):
        self.engine = Engine(sim or SimConfig())
        self.costs = costs or CostModel()
        self.params = params or Params()
        self.layout, self.tables, tokens = build_layout(n_sandboxes, layout)
        self.host = HostMemory(self.layout.sizes.host)
        self.schedulers: dict[int, PcpuScheduler] = {}
        self.sandboxes: dict[int, Sandbox] = {}
        self.monitors: dict[int, Monitor] = {}
        self.apic = IoApic(self.engine, self._live_sandboxes, self.params.delivery_latency)
        self.apic.on_deliver = self._on_irq
        for sid in range(n_sandboxes):
            sched = PcpuScheduler(self.engine, pcpu=sid, owner=sid, trace=self.params.trace_sched)
            self.schedulers[sid] = sched
            self.sandboxes[sid] = Sandbox(sid, sid, self.engine, sched, self.costs)
            self.monitors[sid] = Monitor(sid, self.tables[sid], tokens[sid])
            self.apic.register_monitor(tokens[sid])
        self._vcpu_ids = 0
        self.service_vcpu: dict[int, MainVcpu] = {}
        self.trap_handler = None          # set by the recovery manager
        self._seed_kernel_data()

        from .devices import Network
        from .ipc import ChannelManager
        self.ipc = ChannelManager(self)
        self.net = Network(self)
        if self.params.preemption_timeout:
            self._arm_preemption_timeout()

    # -- construction -----------------------------------------------------

    def _seed_kernel_data(self):
        rng = self.engine.rng
        for sid, rng_range in self.layout.kernel_host.items():
            self.host.write(rng_range.start, rng.randbytes(KERNEL_DATA_BYTES))

    def _next_vcpu_id(self) -> int:
        self._vcpu_ids += 1
        return self._vcpu_ids

    def add_main_vcpu(self, sid: int, c_max: int, period: int, threads=(),
                      service: bool = False) -> MainVcpu:
        v = MainVcpu(self._next_vcpu_id(), c_max, period, pcpu=sid,
                     policy=self.params.replenish_policy, bound_threads=threads)
        self.schedulers[sid].add(v)
        self.assign_priorities(sid)
        if service or sid not in self.service_vcpu:
            self.service_vcpu[sid] = v
        return v

    def add_io_vcpu(self, sid: int, bandwidth, period: int | None = None, device=None) -> IoVcpu:
        if period is None:
            mains = self.main_vcpus(sid)
            period = min((v.period for v in mains), default=self.engine.config.cycles_per_second // 100)
        v = IoVcpu(self._next_vcpu_id(), bandwidth, period, device=device, pcpu=sid,
                   policy=self.params.replenish_policy)
        self.schedulers[sid].add(v)
        return v

    def main_vcpus(self, sid: int) -> list[MainVcpu]:
        return [v for v in self.schedulers[sid].vcpus if isinstance(v, MainVcpu)]

    def io_vcpu(self, sid: int, device) -> Optional[IoVcpu]:
        for v in self.schedulers[sid].vcpus:
            if isinstance(v, IoVcpu) and v.device == device:
                return v
        return None

    def assign_priorities(self, sid: int) -> None:
        mains = self.main_vcpus(sid)
        if mains:
            rms_assign(mains)

    def admission(self) -> dict[int, AdmissionReport]:
        return {sid: admit(s.vcpus) for sid, s in self.schedulers.items()}

    def load(self, sid: int) -> float:
        return float(sum(v.utilization for v in self.main_vcpus(sid)))

    def launch(self, sid: int) -> None:
        self.sandboxes[sid].launch()

    def launch_all(self) -> None:
        for sid in sorted(self.sandboxes):
            if self.sandboxes[sid].state is SandboxState.HALTED:
                self.launch(sid)

    def _live_sandboxes(self):
        return list(self.sandboxes)

    # -- memory -----------------------------------------------------------

    def guest_access(self, sid: int, gpa: int, access: Access, length: int | None = None,
                     data: bytes | None = None, trap: bool = True) -> AccessResult:
        """Guest access through the sandbox's EPT.

        Each failing page is traced as ``ept_violation``. With ``trap`` set the
        sandbox also exits to its monitor with the first violation.
        """
        if access.__class__ is not Access:
            access = Access(access)
        res = guest_access(self.tables[sid], self.host, gpa, access, length, data)
        if res.violations:
            for v in res.violations:
                self.engine.record(sid, "ept_violation", gpa=f"{v.gpa:#x}",
                                   access=v.access, reason=v.reason)
            if trap:
                self.trap(sid, ExitReason.EPT_VIOLATION, res.violations[0])
        return res

    def kernel_gpa(self, offset: int = 0) -> int:
        return self.layout.kernel_gpa.start + offset

    def alias_gpa_of(self, victim: int, offset: int = 0) -> int:
        """GPA equal to the victim's private host address (unmapped elsewhere)."""
        return self.layout.kernel_host[victim].start + offset

    def kernel_digest(self, sid: int) -> str:
        r = self.layout.kernel_host[sid]
        return self.host.region_digest(r.start, r.end)

    def monitor_digest(self, sid: int) -> str:
        r = self.layout.ept_data[sid]
        h = hashlib.sha256()
        h.update(self.host.region_digest(r.start, r.end).encode())
        h.update(self.tables[sid].digest().encode())
        return h.hexdigest()

    # -- traps ------------------------------------------------------------

    def trap(self, sid: int, reason: ExitReason, violation=None) -> None:
        sb = self.sandboxes[sid]
        if sb.state is not SandboxState.RUNNING:
            return
        mon = self.monitors[sid]
        mon.pending_trap = violation
        mon.trap_reason = ExitReason(reason)
        sb.vm_exit(reason, then=lambda: self._monitor_entry(sid))

    def _monitor_entry(self, sid: int) -> None:
        from .sandbox import MonitorAction, monitor_handle
        mon = self.monitors[sid]
        if mon.trap_reason is ExitReason.PREEMPTION_TIMEOUT and mon.pending_trap is None:
            # periodic check found nothing to do
            mon.trap_reason = None
            self.sandboxes[sid].vm_enter()
            return
        if self.trap_handler is not None:
            self.trap_handler(sid)
            return
        action = monitor_handle(mon, self.engine, attributed=False)
        if action is MonitorAction.HALT:
            self.sandboxes[sid].halt()

    def _arm_preemption_timeout(self):
        period = self.params.preemption_timeout

        def tick(ev):
            for sid, sb in sorted(self.sandboxes.items()):
                if sb.state is SandboxState.RUNNING:
                    self.trap(sid, ExitReason.PREEMPTION_TIMEOUT)
            self.engine.after(period, tick, EventKind.TIMER, "preemption-timeout")

        self.engine.after(period, tick, EventKind.TIMER, "preemption-timeout")

    # -- interrupts -------------------------------------------------------

    def _on_irq(self, sid: int, vector: int, context) -> None:
        sb = self.sandboxes[sid]
        if sb.state is not SandboxState.RUNNING:
            self.engine.record(sid, "irq_lost", vector=vector, state=sb.state)
            return
        self.engine.record(sid, "irq_deliver", vector=vector)
        self.net.on_irq(sid, vector, context)

    # -- reporting --------------------------------------------------------

    def summary(self) -> dict:
        return {
            str(sid): {
                "state": sb.state.value,
                "vm_exit_count": sb.vm_exit_count,
                "time_trapped_cycles": sb.time_trapped,
                "recovery_actions": [a.value for a in self.monitors[sid].actions],
            }
            for sid, sb in sorted(self.sandboxes.items())
        }

    def run(self, until=None):
        return self.engine.run(until)
