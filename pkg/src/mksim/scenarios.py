"""Scenario files, the workloads they drive, and the built-in experiments.

A scenario is a JSON object. Times given in milliseconds carry an ``_ms``
suffix; VCPU budgets and periods are in cycles. See ``README.md`` for a
complete example.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, fields
from fractions import Fraction
from pathlib import Path
from typing import Optional

from .devices import IcmpGenerator
from .engine import EventKind, SimConfig, TraceRecord, cycles_from_millis
from .errors import AdmissionError, ScenarioError
from .machine import Machine, Params
from .recovery import FaultMode, FaultSpec, RecoveryManager, RecoveryPolicy
from .sandbox import CostModel

BUILTINS = ("recovery-local", "recovery-remote", "isolation", "msgbench",
            "interrupts", "forkwait", "shared-nic")

WORKLOAD_TYPES = ("icmp-flood", "msg-stream", "msg-poll", "msgbench", "forkwait", "spin")

MSGBENCH_SIZES = tuple(2 ** k for k in range(6, 21))
MSGBENCH_TRIALS = 200
MSGBENCH_PAPER_TRIALS = 5000


# -- config model --------------------------------------------------------

@dataclass
class VifCfg:
    device: str
    ip: str
    mac: Optional[str] = None


@dataclass
class SandboxCfg:
    id: int
    services: list = field(default_factory=list)
    drivers: list = field(default_factory=list)
    vifs: list = field(default_factory=list)


@dataclass
class DeviceCfg:
    id: str
    vector: int
    broadcast: bool = False
    bandwidth: str = "1/10"


@dataclass
class VcpuCfg:
    kind: str
    sandbox: int
    c_max: Optional[int] = None
    period: Optional[int] = None
    bandwidth: Optional[str] = None
    device: Optional[str] = None
    threads: list = field(default_factory=list)
    service: bool = False


@dataclass
class ChannelCfg:
    id: str
    a: int
    b: int
    private: bool = False


@dataclass
class FaultCfg:
    sandbox: int
    component: str
    mode: str = "local"
    at_ms: Optional[float] = None
    after_replies: Optional[dict] = None      # {"generator": name, "count": n}
    blast: list = field(default_factory=list)


@dataclass
class ScenarioConfig:
    name: str = "scenario"
    sim: dict = field(default_factory=dict)
    sandboxes: list = field(default_factory=list)
    devices: list = field(default_factory=list)
    vcpus: list = field(default_factory=list)
    channels: list = field(default_factory=list)
    workloads: list = field(default_factory=list)
    faults: list = field(default_factory=list)
    costs: dict = field(default_factory=dict)
    params: dict = field(default_factory=dict)
    recovery: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ScenarioConfig":
        if not isinstance(d, dict):
            raise ScenarioError("scenario must be a JSON object")
        known = {f.name for f in fields(cls)}
        extra = set(d) - known
        if extra:
            raise ScenarioError(f"unknown top-level keys: {sorted(extra)}")
        sub = {"sandboxes": SandboxCfg, "devices": DeviceCfg, "vcpus": VcpuCfg,
               "channels": ChannelCfg, "faults": FaultCfg}
        kw = {}
        for k, v in d.items():
            if k in sub:
                if not isinstance(v, list):
                    raise ScenarioError(f"{k} must be a list")
                kw[k] = [_build(sub[k], item, f"{k}[{i}]") for i, item in enumerate(v)]
            else:
                kw[k] = v
        cfg = cls(**kw)
        for sb in cfg.sandboxes:
            sb.vifs = [v if isinstance(v, VifCfg) else _build(VifCfg, v, f"sandbox {sb.id} vif")
                       for v in sb.vifs]
        return cfg

    def sim_config(self) -> SimConfig:
        try:
            return SimConfig(**self.sim)
        except (TypeError, ValueError) as e:
            raise ScenarioError(f"sim: {e}") from None

    def ms(self, value) -> int:
        return cycles_from_millis(value, self.sim_config())


def _build(cls, item, where):
    if isinstance(item, cls):
        return item
    if not isinstance(item, dict):
        raise ScenarioError(f"{where}: expected an object")
    names = {f.name for f in fields(cls)}
    extra = set(item) - names
    if extra:
        raise ScenarioError(f"{where}: unknown keys {sorted(extra)}")
    try:
        return cls(**item)
    except TypeError as e:
        raise ScenarioError(f"{where}: {e}") from None


def parse_scenario(text: str) -> ScenarioConfig:
    try:
        data = json.loads(text)
    except json.JSONDecodeError as e:
        raise ScenarioError(e.msg, line=e.lineno) from None
    cfg = ScenarioConfig.from_dict(data)
    validate(cfg)
    return cfg


def load_scenario(path) -> ScenarioConfig:
    return parse_scenario(Path(path).read_text())


def dump_scenario(cfg: ScenarioConfig, path=None) -> str:
    text = json.dumps(cfg.to_dict(), indent=2, sort_keys=True)
    if path is not None:
        Path(path).write_text(text + "\n")
    return text


# -- validation ----------------------------------------------------------

def _fraction(text, where) -> Fraction:
    try:
        f = Fraction(str(text))
    except (ValueError, ZeroDivisionError):
        raise ScenarioError(f"{where}: bad bandwidth {text!r}") from None
    if not 0 < f <= 1:
        raise ScenarioError(f"{where}: bandwidth must be in (0, 1]")
    return f


def validate(cfg: ScenarioConfig) -> None:
    """Check references and run admission per PCPU. Raises ScenarioError."""
    cfg.sim_config()
    ids = [s.id for s in cfg.sandboxes]
    if not ids:
        raise ScenarioError("scenario needs at least one sandbox")
    if sorted(ids) != list(range(len(ids))):
        raise ScenarioError(f"sandbox ids must be 0..{len(ids) - 1}, got {sorted(ids)}")
    sids = set(ids)
    devs = {}
    for d in cfg.devices:
        if d.id in devs:
            raise ScenarioError(f"duplicate device {d.id}")
        if not 0 <= d.vector <= 0xFF:
            raise ScenarioError(f"device {d.id}: vector out of range")
        _fraction(d.bandwidth, f"device {d.id}")
        devs[d.id] = d
    ips = set()
    for sb in cfg.sandboxes:
        for dev in sb.drivers:
            if dev not in devs:
                raise ScenarioError(f"sandbox {sb.id}: driver references unknown device {dev!r}")
        for vif in sb.vifs:
            if vif.device not in sb.drivers:
                raise ScenarioError(f"sandbox {sb.id}: vif on {vif.device!r} without a driver")
            if (vif.device, vif.ip) in ips:
                raise ScenarioError(f"duplicate ip {vif.ip} on {vif.device}")
            ips.add((vif.device, vif.ip))
    threads = {}
    for i, v in enumerate(cfg.vcpus):
        where = f"vcpus[{i}]"
        if v.sandbox not in sids:
            raise ScenarioError(f"{where}: unknown sandbox {v.sandbox}")
        if v.kind == "main":
            if not v.c_max or not v.period or v.c_max <= 0 or v.period <= 0 or v.c_max > v.period:
                raise ScenarioError(f"{where}: main VCPU needs 0 < c_max <= period")
        elif v.kind == "io":
            _fraction(v.bandwidth, where)
            if v.device is not None and v.device not in devs:
                raise ScenarioError(f"{where}: unknown device {v.device!r}")
        else:
            raise ScenarioError(f"{where}: kind must be 'main' or 'io'")
        for t in v.threads:
            if (v.sandbox, t) in threads:
                raise ScenarioError(f"{where}: thread {t!r} bound twice in sandbox {v.sandbox}")
            threads[(v.sandbox, t)] = v
    chans = {}
    for c in cfg.channels:
        for s in (c.a, c.b):
            if s not in sids:
                raise ScenarioError(f"channel {c.id}: unknown sandbox {s}")
        if c.a == c.b:
            raise ScenarioError(f"channel {c.id}: endpoints must differ")
        if c.id in chans:
            raise ScenarioError(f"duplicate channel {c.id}")
        chans[c.id] = c
    gens = set()
    for i, w in enumerate(cfg.workloads):
        _validate_workload(w, f"workloads[{i}]", sids, devs, chans, threads, ips, cfg, gens)
    for i, f in enumerate(cfg.faults):
        where = f"faults[{i}]"
        if f.sandbox not in sids:
            raise ScenarioError(f"{where}: unknown sandbox {f.sandbox}")
        dev = f.component.rsplit("@", 1)[0]
        if f.component != f"{dev}@{f.sandbox}" or dev not in cfg.sandboxes[f.sandbox].drivers:
            raise ScenarioError(f"{where}: sandbox {f.sandbox} has no driver {f.component!r}")
        try:
            FaultMode(f.mode)
        except ValueError:
            raise ScenarioError(f"{where}: bad mode {f.mode!r}") from None
        if (f.at_ms is None) == (f.after_replies is None):
            raise ScenarioError(f"{where}: give exactly one of at_ms or after_replies")
        if f.after_replies is not None and f.after_replies.get("generator") not in gens:
            raise ScenarioError(f"{where}: unknown generator {f.after_replies.get('generator')!r}")
        for j, b in enumerate(f.blast):
            _validate_blast(b, f"{where}.blast[{j}]", sids, chans)
    for key, cls in (("costs", CostModel), ("params", Params)):
        names = {fl.name for fl in fields(cls)}
        bad = set(getattr(cfg, key)) - names
        if bad:
            raise ScenarioError(f"{key}: unknown fields {sorted(bad)}")
    try:
        RecoveryPolicy(**cfg.recovery)
    except (TypeError, ValueError) as e:
        raise ScenarioError(f"recovery: {e}") from None
    _admission(cfg)


def _validate_workload(w, where, sids, devs, chans, threads, ips, cfg, gens):
    if not isinstance(w, dict) or w.get("type") not in WORKLOAD_TYPES:
        raise ScenarioError(f"{where}: type must be one of {list(WORKLOAD_TYPES)}")
    kind = w["type"]
    if "sandbox" in w and w["sandbox"] not in sids:
        raise ScenarioError(f"{where}: unknown sandbox {w['sandbox']}")
    if "thread" in w and (w.get("sandbox"), w["thread"]) not in threads:
        raise ScenarioError(f"{where}: no thread {w['thread']!r} in sandbox {w.get('sandbox')}")
    for c in w.get("channels", []) + ([w["channel"]] if "channel" in w else []):
        if c not in chans:
            raise ScenarioError(f"{where}: unknown channel {c!r}")
        if "sandbox" in w and w["sandbox"] not in (chans[c].a, chans[c].b):
            raise ScenarioError(f"{where}: sandbox {w['sandbox']} is not an endpoint of {c}")
    if kind == "icmp-flood":
        if w.get("device") not in devs:
            raise ScenarioError(f"{where}: unknown device {w.get('device')!r}")
        if (w["device"], w.get("dst_ip")) not in ips:
            raise ScenarioError(f"{where}: no interface with ip {w.get('dst_ip')!r}")
        if w.get("count") is None and w.get("until_replies") is None:
            raise ScenarioError(f"{where}: needs count or until_replies")
        gens.add(w.get("name", "icmp"))
    elif kind == "msgbench":
        for key in ("sender", "receiver"):
            side = w.get(key)
            if not isinstance(side, dict) or (side.get("sandbox"), side.get("thread")) not in threads:
                raise ScenarioError(f"{where}: {key} must name a bound thread")
    elif kind in ("msg-stream", "msg-poll", "forkwait", "spin"):
        if "sandbox" not in w or "thread" not in w:
            raise ScenarioError(f"{where}: needs sandbox and thread")


def _validate_blast(b, where, sids, chans):
    if not isinstance(b, dict):
        raise ScenarioError(f"{where}: expected an object")
    if "channel" in b:
        if b["channel"] not in chans:
            raise ScenarioError(f"{where}: unknown channel {b['channel']!r}")
    elif "kernel_of" in b:
        if b["kernel_of"] not in sids:
            raise ScenarioError(f"{where}: unknown sandbox {b['kernel_of']}")
    elif "gpa" not in b:
        raise ScenarioError(f"{where}: needs channel, kernel_of or gpa")


def _admission(cfg: ScenarioConfig) -> None:
    from .scheduling import IoVcpu, MainVcpu, admit
    per = {s.id: [] for s in cfg.sandboxes}
    mains = {s.id: [] for s in cfg.sandboxes}
    vid = 0
    for v in cfg.vcpus:
        if v.kind == "main":
            vid += 1
            mv = MainVcpu(vid, v.c_max, v.period)
            per[v.sandbox].append(mv)
            mains[v.sandbox].append(mv)
    explicit_io = set()
    for v in cfg.vcpus:
        if v.kind == "io":
            vid += 1
            period = v.period or _default_io_period(mains[v.sandbox], cfg)
            per[v.sandbox].append(IoVcpu(vid, _fraction(v.bandwidth, "io"), period, v.device))
            explicit_io.add((v.sandbox, v.device))
    devs = {d.id: d for d in cfg.devices}
    for sb in cfg.sandboxes:
        for dev in sb.drivers:
            if (sb.id, dev) not in explicit_io:
                vid += 1
                period = _default_io_period(mains[sb.id], cfg)
                per[sb.id].append(IoVcpu(vid, _fraction(devs[dev].bandwidth, "io"), period, dev))
    for sid, vs in per.items():
        rep = admit(vs)
        if not rep.accepted:
            raise AdmissionError(f"sandbox {sid} VCPU set not admitted: {rep}", rep)


def _default_io_period(mains, cfg) -> int:
    return min((v.period for v in mains), default=cfg.sim_config().cycles_per_second // 100)


# -- building and running ------------------------------------------------

def _blast_writes(m: Machine, cfg: ScenarioConfig, blast: list) -> list:
    out = []
    for b in blast:
        fill = bytes([b.get("byte", 0xCC)])
        if "channel" in b:
            gpa = m.ipc.channels[b["channel"]].buffer_gpa + b.get("offset", 0)
            length = b.get("length", 4096 - b.get("offset", 0))
        elif "kernel_of" in b:
            gpa = m.alias_gpa_of(b["kernel_of"], b.get("offset", 0))
            length = b.get("length", 4096)
        else:
            gpa = b["gpa"]
            length = b.get("length", 4096)
        out.append((gpa, fill * length))
    return out


class Built:
    """A machine assembled from a config, plus its live workloads."""

    def __init__(self, cfg: ScenarioConfig):
        validate(cfg)
        self.cfg = cfg
        params = Params(**cfg.params)
        self.m = m = Machine(len(cfg.sandboxes), cfg.sim_config(), CostModel().replace(**cfg.costs),
                             params)
        self.threads = {}
        for v in cfg.vcpus:
            if v.kind == "main":
                vc = m.add_main_vcpu(v.sandbox, v.c_max, v.period, tuple(v.threads), v.service)
                for t in v.threads:
                    self.threads[(v.sandbox, t)] = vc
        for v in cfg.vcpus:
            if v.kind == "io":
                vc = m.add_io_vcpu(v.sandbox, _fraction(v.bandwidth, "io"), v.period, v.device)
                for t in v.threads:
                    self.threads[(v.sandbox, t)] = vc
        for d in cfg.devices:
            sharers = [s.id for s in cfg.sandboxes if d.id in s.drivers]
            if sharers:
                m.net.add_device(d.id, d.vector, sharers, _fraction(d.bandwidth, "io"),
                                 broadcast=d.broadcast)
        for sb in cfg.sandboxes:
            m.sandboxes[sb.id].services = list(sb.services)
            for vif in sb.vifs:
                m.net.add_vif(vif.device, sb.id, vif.ip, vif.mac)
        for c in cfg.channels:
            m.ipc.create_channel(c.a, c.b, c.private, chan_id=c.id)
        self.recovery = RecoveryManager(m, RecoveryPolicy(**cfg.recovery))
        self.generators: dict[str, IcmpGenerator] = {}
        self._fault_triggers = []
        self.spins = []
        for f in cfg.faults:
            self._arm_fault(f)
        for w in cfg.workloads:
            self._start(w)
        m.launch_all()

    def thread(self, sid, name):
        return self.threads[(sid, name)]

    def _arm_fault(self, f: FaultCfg) -> None:
        def fire():
            spec = FaultSpec(self.m.engine.now, f.sandbox, f.component,
                             _blast_writes(self.m, self.cfg, f.blast), f.mode)
            self.recovery.inject_fault(spec)

        if f.at_ms is not None:
            self.m.engine.at(self.cfg.ms(f.at_ms), lambda ev: fire(), EventKind.FAULT_INJECT,
                             str(f.sandbox))
        else:
            self._fault_triggers.append((f.after_replies["generator"],
                                         int(f.after_replies["count"]), fire))

    def _on_reply(self, gen_name):
        def cb(pkt):
            gen = self.generators[gen_name]
            for g, n, fire in list(self._fault_triggers):
                if g == gen_name and len(gen.replies) == n:
                    self._fault_triggers.remove((g, n, fire))
                    fire()
        return cb

    def _start(self, w: dict) -> None:
        kind = w["type"]
        cfg, m = self.cfg, self.m
        start = cfg.ms(w.get("start_ms", 0))
        until = cfg.ms(w["until_ms"]) if "until_ms" in w else None
        if kind == "icmp-flood":
            name = w.get("name", "icmp")
            self.generators[name] = IcmpGenerator(
                m.net, w["device"], w["dst_ip"], cfg.ms(w["interval_ms"]), start=start,
                count=w.get("count"), until_replies=w.get("until_replies"),
                src_ip=w.get("src_ip", "192.168.1.100"), name=name,
                on_reply=self._on_reply(name))
        elif kind == "msg-stream":
            MsgStream(self, w, start, until)
        elif kind == "msg-poll":
            MsgPoll(self, w, start, until)
        elif kind == "msgbench":
            MsgBench(self, w, start)
        elif kind == "forkwait":
            ForkWait(self, w, start)
        elif kind == "spin":
            sid = w["sandbox"]
            vc = self.thread(sid, w["thread"])
            def spin(ev):
                self.spins.append(m.schedulers[sid].submit(vc, None, label="spin"))
            m.engine.at(start, spin, EventKind.WORKLOAD_STEP, f"spin{sid}")

    def stop_spins(self) -> None:
        for item in self.spins:
            self.m.schedulers[item.vcpu.pcpu].cancel(item)
        self.spins = []

    def run(self, horizon: int | None = None) -> list[TraceRecord]:
        return self.m.engine.run(horizon)


class MsgStream:
    """Non-blocking sender: one single-chunk message per channel per tick."""

    def __init__(self, built: Built, w: dict, start: int, until: Optional[int]):
        self.b = built
        m = built.m
        self.sid = w["sandbox"]
        vc = built.thread(self.sid, w["thread"])
        self.eps = [m.ipc.endpoint(m.ipc.channels[c], self.sid, vc) for c in w["channels"]]
        self.interval = built.cfg.ms(w["interval_ms"])
        self.size = int(w.get("size", 64))
        self.until = until
        self.n = 0
        m.engine.at(start, self._tick, EventKind.WORKLOAD_STEP, f"stream{self.sid}")

    def _tick(self, ev):
        m = self.b.m
        self.n += 1
        if m.sandboxes[self.sid].running:
            payload = (self.n.to_bytes(4, "little") * (self.size // 4 + 1))[:self.size]
            for ep in self.eps:
                ep.try_send(payload)
        else:
            m.engine.record(self.sid, "msg_send_missed", n=self.n)
        nxt = m.engine.now + self.interval
        if self.until is None or nxt < self.until:
            m.engine.at(nxt, self._tick, EventKind.WORKLOAD_STEP, f"stream{self.sid}")


class MsgPoll:
    """Receiver that polls its mailbox once per interval."""

    def __init__(self, built: Built, w: dict, start: int, until: Optional[int]):
        self.b = built
        m = built.m
        self.sid = w["sandbox"]
        vc = built.thread(self.sid, w["thread"])
        self.ep = m.ipc.endpoint(m.ipc.channels[w["channel"]], self.sid, vc)
        self.interval = built.cfg.ms(w["interval_ms"])
        self.until = until
        m.engine.at(start + self.interval, self._tick, EventKind.CHANNEL_POLL, f"poll{self.sid}")

    def _tick(self, ev):
        m = self.b.m
        if m.sandboxes[self.sid].running:
            def got(msg):
                if msg is None:
                    m.engine.record(self.sid, "msg_poll_empty", chan=self.ep.chan.id)
            self.ep.poll_recv(got)
        else:
            m.engine.record(self.sid, "msg_poll_missed", chan=self.ep.chan.id,
                            state=m.sandboxes[self.sid].state)
        nxt = m.engine.now + self.interval
        if self.until is None or nxt < self.until:
            m.engine.at(nxt, self._tick, EventKind.CHANNEL_POLL, f"poll{self.sid}")


class MsgBench:
    """Back-to-back blocking transfers of each size, ``trials`` times.

    Each trial starts after a random gap shorter than the receiver VCPU's
    period so that trials sample different budget phases.
    """

    def __init__(self, built: Built, w: dict, start: int):
        self.b = built
        m = built.m
        chan = m.ipc.channels[w["channel"]]
        tx, rx = w["sender"], w["receiver"]
        self.tx_vcpu = built.thread(tx["sandbox"], tx["thread"])
        self.rx_vcpu = built.thread(rx["sandbox"], rx["thread"])
        self.tx = m.ipc.endpoint(chan, tx["sandbox"], self.tx_vcpu)
        self.rx = m.ipc.endpoint(chan, rx["sandbox"], self.rx_vcpu)
        sizes = w.get("sizes", list(MSGBENCH_SIZES))
        trials = int(w.get("trials", MSGBENCH_TRIALS))
        self.plan = [(s, t) for s in sizes for t in range(trials)]
        self.pos = 0
        self.rng = m.engine.rng
        self._payloads = {}
        m.engine.at(start, lambda ev: self._next(), EventKind.WORKLOAD_STEP, "msgbench")

    def _payload(self, size):
        p = self._payloads.get(size)
        if p is None:
            p = bytes((i * 7 + size) & 0xFF for i in range(min(size, 4096)))
            p = (p * (size // 4096 + 1))[:size]
            self._payloads = {size: p}
        return p

    def _next(self):
        m = self.b.m
        if self.pos >= len(self.plan):
            m.engine.record(None, "msgbench_done", trials=len(self.plan))
            self.b.stop_spins()
            return
        gap = self.rng.randrange(self.rx_vcpu.period)
        m.engine.after(gap, lambda ev: self._go(), EventKind.WORKLOAD_STEP, "msgbench")

    def _go(self):
        size, trial = self.plan[self.pos]
        payload = self._payload(size)

        def received(msg):
            if msg.data != payload:
                self.b.m.engine.record(self.rx.sid, "msg_corrupt", seq=msg.seq, size=size)
            self.pos += 1
            self._next()

        self.rx.recv(received)
        self.tx.send(payload)


class ForkWait:
    """fork() then waitpid(), ``iterations`` times, entirely inside the guest."""

    def __init__(self, built: Built, w: dict, start: int):
        self.b = built
        self.sid = w["sandbox"]
        self.vcpu = built.thread(self.sid, w["thread"])
        self.iterations = int(w.get("iterations", 40000))
        self.done = 0
        self.t0 = None
        built.m.engine.at(start, lambda ev: self._step(), EventKind.WORKLOAD_STEP, "forkwait")

    def _step(self):
        m = self.b.m
        if self.t0 is None:
            self.t0 = m.engine.now
        if self.done >= self.iterations:
            m.engine.record(self.sid, "forkwait_done", iterations=self.done,
                            cycles=m.engine.now - self.t0)
            return
        sched = m.schedulers[self.sid]

        def forked():
            sched.submit(self.vcpu, m.params.syscall_wait, waited, label="waitpid")

        def waited():
            self.done += 1
            self._step()

        sched.submit(self.vcpu, m.params.syscall_fork, forked, label="fork")


def run_config(cfg: ScenarioConfig, horizon: int | None = None) -> Built:
    built = Built(cfg)
    built.run(horizon)
    return built


# -- built-in experiments ------------------------------------------------

def _main(sid, c_max, period, threads=(), service=False):
    return VcpuCfg("main", sid, c_max=c_max, period=period, threads=list(threads), service=service)


def _recovery_cfg(mode: str, seed: int) -> ScenarioConfig:
    period = 20_000_000
    cfg = ScenarioConfig(name=f"recovery-{mode}", sim={"seed": seed})
    cfg.sandboxes = [SandboxCfg(0, ["net"], ["nic0"], [VifCfg("nic0", "10.0.0.1")])]
    cfg.sandboxes += [SandboxCfg(i, ["app"]) for i in (1, 2, 3)]
    cfg.devices = [DeviceCfg("nic0", 0x40)]
    cfg.vcpus = [_main(s, period * 2 // 5, period, ["net" if s == 0 else "app"], True)
                 for s in range(4)]
    cfg.workloads = [{"type": "icmp-flood", "name": "ping", "device": "nic0",
                      "dst_ip": "10.0.0.1", "interval_ms": 500, "until_replies": 50}]
    cfg.faults = [FaultCfg(0, "nic0@0", mode, after_replies={"generator": "ping", "count": 20})]
    return cfg


def _isolation_cfg(seed: int) -> ScenarioConfig:
    period = 20_000_000
    cfg = ScenarioConfig(name="isolation", sim={"seed": seed})
    cfg.sandboxes = [SandboxCfg(0, ["net", "msg"], ["nic0"], [VifCfg("nic0", "10.0.0.1")])]
    cfg.sandboxes += [SandboxCfg(i, ["msg"]) for i in (1, 2, 3)]
    cfg.devices = [DeviceCfg("nic0", 0x40)]
    cfg.vcpus = [_main(0, period * 2 // 5, period, ["net"], True),
                 _main(0, period // 5, period * 2, ["rx"])]
    cfg.vcpus += [_main(s, period * 2 // 5, period, ["tx" if s == 1 else "rx"]) for s in (1, 2, 3)]
    cfg.channels = [ChannelCfg(f"ch1{r}", 1, r, private=True) for r in (0, 2, 3)]
    end = 6000
    cfg.workloads = [{"type": "icmp-flood", "name": "ping", "device": "nic0",
                      "dst_ip": "10.0.0.1", "interval_ms": 500, "count": end // 500}]
    cfg.workloads.append({"type": "msg-stream", "sandbox": 1, "thread": "tx",
                          "channels": ["ch10", "ch12", "ch13"], "interval_ms": 50,
                          "size": 64, "until_ms": end})
    for r, ivl in ((0, 100), (2, 800), (3, 1000)):
        cfg.workloads.append({"type": "msg-poll", "sandbox": r, "thread": "rx",
                              "channel": f"ch1{r}", "interval_ms": ivl, "until_ms": end})
    blast = [{"channel": "ch10"}]
    blast += [{"kernel_of": v, "offset": 0, "length": 2 * 4096} for v in (1, 2, 3)]
    cfg.faults = [FaultCfg(0, "nic0@0", "local", at_ms=2250, blast=blast)]
    return cfg


def _msgbench_cfg(arm: str, seed: int, trials: int) -> ScenarioConfig:
    period = 20_000
    share = {"hi": Fraction(1, 2), "low": Fraction(2, 5)}[arm]
    cfg = ScenarioConfig(name=f"msgbench-{arm}", sim={"seed": seed},
                         params={"trace_sched": False, "trace_chunks": False})
    cfg.sandboxes = [SandboxCfg(0, ["tx"]), SandboxCfg(1, ["rx"])]
    # The hog is created first so it has the lower id and wins the
    # background band; the benchmark threads then only run on budget.
    cfg.vcpus = [_main(s, period * 3, period * 10, ["hog"]) for s in (0, 1)]
    cfg.vcpus += [_main(0, int(period * share), period, ["tx"]),
                  _main(1, int(period * share), period, ["rx"])]
    cfg.channels = [ChannelCfg("ch01", 0, 1, private=True)]
    cfg.workloads = [{"type": "spin", "sandbox": s, "thread": "hog"} for s in (0, 1)]
    cfg.workloads.append({"type": "msgbench", "channel": "ch01",
                          "sender": {"sandbox": 0, "thread": "tx"},
                          "receiver": {"sandbox": 1, "thread": "rx"},
                          "sizes": list(MSGBENCH_SIZES), "trials": trials})
    return cfg


def _interrupts_cfg(seed: int, n: int = 4, pings: int = 30000) -> ScenarioConfig:
    period = 20_000_000
    cfg = ScenarioConfig(name="interrupts", sim={"seed": seed}, params={"trace_sched": False})
    cfg.sandboxes = [SandboxCfg(i, ["net"] if i == 0 else [], ["nic0"],
                                [VifCfg("nic0", f"10.0.0.{i + 1}")]) for i in range(n)]
    cfg.devices = [DeviceCfg("nic0", 0x40, broadcast=True)]
    cfg.vcpus = [_main(s, period * 2 // 5, period, ["net"], True) for s in range(n)]
    cfg.workloads = [{"type": "icmp-flood", "name": "ping", "device": "nic0",
                      "dst_ip": "10.0.0.1", "interval_ms": 3, "count": pings}]
    return cfg


def _forkwait_cfg(seed: int, iterations: int = 40000) -> ScenarioConfig:
    period = 20_000_000
    cfg = ScenarioConfig(name="forkwait", sim={"seed": seed}, params={"trace_sched": False})
    cfg.sandboxes = [SandboxCfg(0, ["shell"])]
    cfg.vcpus = [_main(0, period // 2, period, ["shell"], True)]
    cfg.workloads = [{"type": "forkwait", "sandbox": 0, "thread": "shell",
                      "iterations": iterations}]
    return cfg


def _shared_nic_cfg(seed: int, pings: int = 30000) -> ScenarioConfig:
    period = 20_000_000
    cfg = ScenarioConfig(name="shared-nic", sim={"seed": seed}, params={"trace_sched": False})
    cfg.sandboxes = [SandboxCfg(i, ["net"], ["nic0"], [VifCfg("nic0", f"10.0.0.{i + 1}")])
                     for i in range(2)]
    cfg.devices = [DeviceCfg("nic0", 0x40)]
    cfg.vcpus = [_main(s, period * 2 // 5, period, ["net"], True) for s in range(2)]
    cfg.workloads = [{"type": "icmp-flood", "name": f"host{i}", "device": "nic0",
                      "dst_ip": f"10.0.0.{i + 1}", "src_ip": f"192.168.1.{100 + i}",
                      "interval_ms": 1, "count": pings} for i in range(2)]
    return cfg


def builtin_arms(name: str, seed: int = 0, paper_scale: bool = False,
                 trials: int | None = None) -> list[tuple[str, ScenarioConfig]]:
    """The configs a built-in demo runs, as ``(arm, config)`` pairs."""
    if name in ("recovery-local", "recovery-remote"):
        mode = name.split("-")[1]
        return [(mode, _recovery_cfg(mode, seed)), ("reboot", _recovery_cfg("reboot", seed))]
    if name == "isolation":
        return [("main", _isolation_cfg(seed))]
    if name == "msgbench":
        n = trials or (MSGBENCH_PAPER_TRIALS if paper_scale else MSGBENCH_TRIALS)
        return [("hi", _msgbench_cfg("hi", seed, n)), ("low", _msgbench_cfg("low", seed, n))]
    if name == "interrupts":
        return [("main", _interrupts_cfg(seed))]
    if name == "forkwait":
        return [("main", _forkwait_cfg(seed))]
    if name == "shared-nic":
        return [("main", _shared_nic_cfg(seed))]
    raise ScenarioError(f"unknown built-in {name!r}; choose from {', '.join(BUILTINS)}")


@dataclass
class DemoRun:
    name: str
    arms: list                 # [(arm, Built)]
    records: list              # merged trace, each row tagged with its arm


def tag_records(arm: str, records) -> list[TraceRecord]:
    return [TraceRecord(r.at, r.sandbox, r.event_type, (("arm", arm),) + tuple(r.detail))
            for r in records]


def run_arms(name: str, arms, horizon: int | None = None) -> DemoRun:
    built, merged = [], []
    for arm, cfg in arms:
        b = run_config(cfg, horizon)
        built.append((arm, b))
        merged.extend(tag_records(arm, b.m.engine.trace))
    return DemoRun(name, built, merged)


def run_builtin(name: str, seed: int = 0, paper_scale: bool = False,
                trials: int | None = None) -> DemoRun:
    return run_arms(name, builtin_arms(name, seed, paper_scale, trials))
