"""A shared NIC with one driver instance per sandbox, and an ICMP workload."""

from __future__ import annotations

from collections import deque
from dataclasses import dataclass, field, replace
from enum import Enum
from fractions import Fraction
from typing import Callable, Optional

from .engine import EventKind
from .errors import SimError, StateError
from .interrupts import BROADCAST_ALL, Demux, early_demux
from .memory import Access, Range

# Per-sandbox duplicated driver structures live right after the seeded
# kernel data, one slot per device.
PRIVATE_DATA_OFFSET = 0x20000
PRIVATE_DATA_SIZE = 0x4000

LOCK_FREE = 0
LOCK_HELD = 1


class DriverState(str, Enum):
    HEALTHY = "healthy"
    CORRUPTED = "corrupted"
    REINITIALIZING = "reinitializing"
    # attached at run time, not yet initialized (recovery targets)
    DETACHED = "detached"


class Implementation(str, Enum):
    PRIMARY = "primary"
    ALTERNATE = "alternate"


@dataclass
class NicDevice:
    id: str
    vector: int
    shared_lock_gpa: int
    attached: list = field(default_factory=list)
    lock_holder: Optional[int] = None
    lock_waiters: list = field(default_factory=list)


@dataclass
class DriverInstance:
    sandbox: int
    device: str
    private_data_gpa: int
    private_data_hpa: Range
    state: DriverState = DriverState.HEALTHY
    implementation: Implementation = Implementation.PRIMARY
    generation: int = 0
    # one packet in the driver at a time; the rest wait here
    backlog: deque = field(default_factory=deque, repr=False)
    busy: bool = False

    @property
    def id(self) -> str:
        return f"{self.device}@{self.sandbox}"

    @property
    def healthy(self) -> bool:
        return self.state is DriverState.HEALTHY


@dataclass(frozen=True)
class VirtualInterface:
    sandbox: int
    ip: str
    mac: str


@dataclass(frozen=True)
class IcmpPacket:
    kind: str        # "request" or "reply"
    seq: int
    src_ip: str
    dst_ip: str
    timestamp: int
    handled_by: Optional[int] = None

    def reply(self, now: int, handler: int) -> "IcmpPacket":
        return IcmpPacket("reply", self.seq, self.dst_ip, self.src_ip, now, handler)


class Network:
    """Devices, driver instances, virtual interfaces and packet routing."""

    def __init__(self, machine):
        self.m = machine
        self.devices: dict[str, NicDevice] = {}
        self.drivers: dict[tuple[str, int], DriverInstance] = {}
        self.vifs: dict[str, dict[str, VirtualInterface]] = {}   # device -> ip -> vif
        self.listeners: dict[str, Callable[[IcmpPacket], None]] = {}
        self.handled: dict[int, int] = {}
        self.discarded: dict[int, int] = {}

    # -- setup ------------------------------------------------------------

    def add_device(self, dev_id: str, vector: int, sharers, bandwidth=Fraction(1, 10),
                   period: int | None = None, broadcast: bool = False) -> NicDevice:
        if dev_id in self.devices:
            raise SimError(f"device {dev_id} already exists")
        sharers = sorted(sharers)
        if not sharers:
            raise SimError("a device needs at least one sharing sandbox")
        dev = NicDevice(dev_id, vector, self.m.ipc.alloc_lock_byte())
        self.devices[dev_id] = dev
        self.vifs[dev_id] = {}
        self.m.host.write(dev.shared_lock_gpa, bytes([LOCK_FREE]))
        mon = self.m.monitors[sharers[0]]
        self.m.apic.program(vector, BROADCAST_ALL if broadcast else sharers, mon.token)
        for sid in sharers:
            self.attach(dev_id, sid, bandwidth=bandwidth, period=period)
        return dev

    def attach(self, dev_id: str, sid: int, bandwidth=Fraction(1, 10), period=None,
               state: DriverState = DriverState.HEALTHY) -> DriverInstance:
        dev = self.devices[dev_id]
        if (dev_id, sid) in self.drivers:
            return self.drivers[(dev_id, sid)]
        slot = list(self.devices).index(dev_id)
        gpa = self.m.kernel_gpa(PRIVATE_DATA_OFFSET + slot * PRIVATE_DATA_SIZE)
        hpa = self.m.layout.kernel_hpa(sid, gpa)
        inst = DriverInstance(sid, dev_id, gpa, Range(hpa, PRIVATE_DATA_SIZE), state=state)
        self.drivers[(dev_id, sid)] = inst
        dev.attached.append(inst.id)
        self.m.sandboxes[sid].drivers.append(inst.id)
        if self.m.io_vcpu(sid, dev_id) is None:
            self.m.add_io_vcpu(sid, bandwidth, period, device=dev_id)
        self._write_private(inst)
        return inst

    def _write_private(self, inst: DriverInstance) -> None:
        tag = f"{inst.id}:{inst.implementation.value}:{inst.generation}".encode()
        blob = (tag * (PRIVATE_DATA_SIZE // len(tag) + 1))[:PRIVATE_DATA_SIZE]
        self.m.host.write(inst.private_data_hpa.start, blob)

    def add_vif(self, dev_id: str, sid: int, ip: str, mac: str | None = None) -> VirtualInterface:
        table = self.vifs[dev_id]
        if ip in table:
            raise SimError(f"ip {ip} already bound on {dev_id}")
        vif = VirtualInterface(sid, ip, mac or f"02:00:00:00:{sid:02x}:{len(table):02x}")
        table[ip] = vif
        return vif

    def move_vif(self, dev_id: str, ip: str, sid: int) -> VirtualInterface:
        old = self.vifs[dev_id][ip]
        vif = replace(old, sandbox=sid)
        self.vifs[dev_id][ip] = vif
        self.m.engine.record(sid, "vif_move", dev=dev_id, ip=ip, src=old.sandbox)
        return vif

    def local_ips(self, dev_id: str, sid: int) -> list[str]:
        return [ip for ip, v in self.vifs[dev_id].items() if v.sandbox == sid]

    def device_for_vector(self, vector: int) -> Optional[NicDevice]:
        for dev in self.devices.values():
            if dev.vector == vector:
                return dev
        return None

    def instance(self, dev_id: str, sid: int) -> Optional[DriverInstance]:
        return self.drivers.get((dev_id, sid))

    def listen(self, ip: str, callback: Callable[[IcmpPacket], None]) -> None:
        self.listeners[ip] = callback

    # -- packet path ------------------------------------------------------

    def nic_rx(self, dev_id: str, packet: IcmpPacket) -> None:
        dev = self.devices[dev_id]
        self.m.apic.raise_irq(dev.vector, packet)

    def on_irq(self, sid: int, vector: int, packet) -> None:
        dev = self.device_for_vector(vector)
        if dev is None:
            self.m.engine.record(sid, "irq_discard", vector=vector, why="no-device")
            self.discarded[sid] = self.discarded.get(sid, 0) + 1
            return
        inst = self.instance(dev.id, sid)
        io = self.m.io_vcpu(sid, dev.id)
        verdict = early_demux(inst is not None, self.local_ips(dev.id, sid), packet)
        if io is None:
            self._demuxed(sid, dev, inst, packet, verdict)
            return
        initiator = self.m.service_vcpu.get(sid) if verdict is Demux.HANDLE else None
        self.m.schedulers[sid].submit(
            io, self.m.params.demux_cost,
            lambda: self._demuxed(sid, dev, inst, packet, verdict),
            label="demux", initiator=initiator)

    def _demuxed(self, sid, dev, inst, packet, verdict) -> None:
        seq = getattr(packet, "seq", "-")
        if verdict is Demux.DISCARD:
            self.discarded[sid] = self.discarded.get(sid, 0) + 1
            self.m.engine.record(sid, "irq_discard", vector=dev.vector, seq=seq)
            return
        self.handled[sid] = self.handled.get(sid, 0) + 1
        self.m.engine.record(sid, "irq_handle", vector=dev.vector, seq=seq)
        self.driver_handle(inst, packet)

    def driver_handle(self, inst: DriverInstance, packet: IcmpPacket) -> None:
        """Serve one request under the device's shared lock.

        The driver works on one packet at a time, so a packet that arrives
        while another is being served waits in the instance's backlog.
        """
        sid = inst.sandbox
        if not inst.healthy:
            self.m.engine.record(sid, "icmp_drop", seq=packet.seq, driver=inst.state)
            return
        if inst.busy:
            inst.backlog.append(packet)
            return
        inst.busy = True
        dev = self.devices[inst.device]
        io = self.m.io_vcpu(sid, dev.id)
        sched = self.m.schedulers[sid]
        initiator = self.m.service_vcpu.get(sid)
        gen = inst.generation
        waited = {"n": 0}

        def finish():
            inst.busy = False
            if inst.backlog:
                self.driver_handle(inst, inst.backlog.popleft())

        def try_lock():
            if inst.generation != gen or not inst.healthy:
                self.m.engine.record(sid, "icmp_drop", seq=packet.seq, driver=inst.state)
                return
            got = self.m.guest_access(sid, dev.shared_lock_gpa, Access.READ, 1)
            if not got.ok:
                return finish()
            if got.data[0] != LOCK_FREE:
                if waited["n"] == 0:
                    self.m.engine.record(sid, "lock_wait", dev=dev.id, holder=dev.lock_holder)
                waited["n"] += 1
                # spin on the flag; the spin burns I/O VCPU budget until the
                # holder lets go, then one more test-and-set costs lock_spin
                item = sched.submit(io, None, try_lock, label="lock_spin", initiator=initiator)
                dev.lock_waiters.append((sched, item))
                return
            self.m.guest_access(sid, dev.shared_lock_gpa, Access.WRITE, data=bytes([LOCK_HELD]))
            dev.lock_holder = sid
            self.m.engine.record(sid, "lock_acquire", dev=dev.id, seq=packet.seq)
            sched.submit(io, self.m.params.icmp_service, served, label="icmp_service",
                         initiator=initiator)

        def served():
            if inst.generation != gen:
                # discarded with the old driver; the monitor released the lock
                return
            self.release_lock(dev, sid)
            reply = packet.reply(self.m.engine.now, sid)
            self.transmit(reply)
            finish()

        try_lock()

    def release_lock(self, dev: NicDevice, sid: int, forced: bool = False) -> bool:
        if dev.lock_holder != sid:
            return False
        self.m.host.write(dev.shared_lock_gpa, bytes([LOCK_FREE]))
        dev.lock_holder = None
        self.m.engine.record(sid, "lock_release", dev=dev.id, forced=forced)
        while dev.lock_waiters:
            sched, item = dev.lock_waiters.pop(0)
            if not item.cancelled:
                sched.finish_spin(item, self.m.params.lock_spin)
                break
        return True

    def release_locks_of(self, sid: int) -> None:
        for dev in self.devices.values():
            self.release_lock(dev, sid, forced=True)

    def transmit(self, packet: IcmpPacket) -> None:
        cb = self.listeners.get(packet.dst_ip)
        if cb is not None:
            cb(packet)

    # -- fault hooks ------------------------------------------------------

    def corrupt_driver(self, inst: DriverInstance, blast=()):
        """Mark ``inst`` corrupted and replay the blast writes as its sandbox.

        Returns ``(violations, written)`` where ``written`` lists the
        ``(gpa, length)`` ranges that landed.
        """
        sid = inst.sandbox
        inst.state = DriverState.CORRUPTED
        inst.generation += 1
        self._reset_queue(inst)
        self.m.engine.record(sid, "driver_corrupt", driver=inst.id, writes=len(blast))
        violations, written = [], []
        for gpa, data in blast:
            res = self.m.guest_access(sid, gpa, Access.WRITE, data=bytes(data), trap=False)
            if res.ok:
                written.append((gpa, len(data)))
            violations.extend(res.violations)
        return violations, written

    def _reset_queue(self, inst: DriverInstance) -> None:
        """Forget the packets the old driver instance was holding."""
        for pkt in inst.backlog:
            self.m.engine.record(inst.sandbox, "icmp_drop", seq=pkt.seq, driver=inst.state)
        inst.backlog.clear()
        inst.busy = False

    def switch_implementation(self, inst: DriverInstance) -> Implementation:
        inst.implementation = (Implementation.ALTERNATE
                               if inst.implementation is Implementation.PRIMARY
                               else Implementation.PRIMARY)
        self.m.engine.record(inst.sandbox, "driver_switch", driver=inst.id,
                             implementation=inst.implementation)
        return inst.implementation

    def driver_reinit(self, inst: DriverInstance, switch_implementation: bool = False,
                      then: Callable[[], None] | None = None,
                      on_phase: Callable[[str, int], None] | None = None) -> int:
        """Run the reinit phases back to back. Returns the completion cycle.

        In-flight work of the old instance is dropped. ``on_phase`` is called
        with ``(name, cycles)`` as each phase starts.
        """
        if inst.state is DriverState.REINITIALIZING:
            raise StateError(f"driver {inst.id} is already reinitializing")
        if inst.state is DriverState.HEALTHY:
            raise StateError(f"driver {inst.id} is healthy; nothing to reinitialize")
        costs = self.m.costs
        eng = self.m.engine
        inst.state = DriverState.REINITIALIZING
        inst.generation += 1
        self._reset_queue(inst)
        io = self.m.io_vcpu(inst.sandbox, inst.device)
        if io is not None:
            dropped = self.m.schedulers[inst.sandbox].drop_work(io)
            if dropped:
                eng.record(inst.sandbox, "inflight_discard", driver=inst.id, items=dropped)
        phases = []
        if switch_implementation:
            phases.append(("driver_switch", costs.driver_switch))
        phases += [("driver_reinit", costs.driver_reinit), ("network_reinit", costs.network_reinit)]
        total = sum(c for _, c in phases)

        def run(i):
            if i == len(phases):
                inst.state = DriverState.HEALTHY
                self._write_private(inst)
                eng.record(inst.sandbox, "driver_healthy", driver=inst.id,
                           implementation=inst.implementation)
                if then is not None:
                    then()
                return
            name, cycles = phases[i]
            if name == "driver_switch":
                self.switch_implementation(inst)
            eng.record(inst.sandbox, "driver_phase", driver=inst.id, phase=name, cycles=cycles)
            if on_phase is not None:
                on_phase(name, cycles)
            eng.after(cycles, lambda ev: run(i + 1), EventKind.TIMER, f"reinit{inst.sandbox}")

        run(0)
        return eng.now + total


class IcmpGenerator:
    """External pinger. Sends one echo request every ``interval`` cycles.

    A request not answered before the next one goes out (or, for the last
    one, within one interval) is traced as ``icmp_missed``. Stops after
    ``count`` requests or once ``until_replies`` replies have arrived.
    """

    def __init__(self, net: Network, device: str, dst_ip: str, interval: int,
                 start: int = 0, count: int | None = None, until_replies: int | None = None,
                 src_ip: str = "192.168.1.100", name: str = "icmp",
                 on_reply: Callable[[IcmpPacket], None] | None = None):
        if count is None and until_replies is None:
            raise ValueError("generator needs count or until_replies")
        self.net = net
        self.eng = net.m.engine
        self.device = device
        self.dst_ip = dst_ip
        self.interval = interval
        self.count = count
        self.until_replies = until_replies
        self.src_ip = src_ip
        self.name = name
        self.on_reply = on_reply
        self.sent = 0
        self.replies: list[IcmpPacket] = []
        self.missed: list[int] = []
        self._outstanding: dict[int, int] = {}
        self.done = False
        net.listen(src_ip, self._reply)
        self.eng.at(start, self._tick, EventKind.WORKLOAD_STEP, name)

    def _expire(self, before_seq: int) -> None:
        for seq in sorted(s for s in self._outstanding if s < before_seq):
            del self._outstanding[seq]
            self.missed.append(seq)
            self.eng.record(None, "icmp_missed", gen=self.name, seq=seq)

    def _finished(self) -> bool:
        if self.count is not None and self.sent >= self.count:
            return True
        return self.until_replies is not None and len(self.replies) >= self.until_replies

    def _tick(self, ev) -> None:
        self._expire(self.sent + 1)
        if self._finished():
            self.done = True
            return
        self.sent += 1
        seq = self.sent
        pkt = IcmpPacket("request", seq, self.src_ip, self.dst_ip, self.eng.now)
        self._outstanding[seq] = self.eng.now
        self.eng.record(None, "icmp_req", gen=self.name, seq=seq, dst=self.dst_ip)
        self.net.nic_rx(self.device, pkt)
        self.eng.after(self.interval, self._tick, EventKind.WORKLOAD_STEP, self.name)

    def _reply(self, pkt: IcmpPacket) -> None:
        sent_at = self._outstanding.pop(pkt.seq, None)
        if sent_at is None:
            self.eng.record(None, "icmp_late", gen=self.name, seq=pkt.seq)
            return
        self.replies.append(pkt)
        self.eng.record(pkt.handled_by, "icmp_reply", gen=self.name, seq=pkt.seq,
                        rtt=self.eng.now - sent_at, handler=pkt.handled_by)
        if self.on_reply is not None:
            self.on_reply(pkt)
