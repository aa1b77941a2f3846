"""Emulated I/O APIC redirection table, local delivery and monitor IPIs."""

from __future__ import annotations

from dataclasses import dataclass
from enum import Enum
from typing import Callable, Iterable, Optional, Union

from .engine import Engine, EventKind, SimTime
from .errors import CapabilityError, SimError
from .memory import MonitorToken

BROADCAST_ALL = "broadcast-all"

Destinations = Union[frozenset, str]


@dataclass(frozen=True)
class RedirectionEntry:
    vector: int
    destinations: Destinations

    def __post_init__(self):
        if not 0 <= self.vector <= 0xFF:
            raise ValueError("vector must fit in 8 bits")
        if self.destinations != BROADCAST_ALL and not self.destinations:
            raise ValueError("destination set must be nonempty")


@dataclass(frozen=True)
class RedirectGrant:
    """Permission, handed out by a monitor, for a sandbox to reroute one vector."""

    sandbox: int
    vector: int


@dataclass(frozen=True)
class Ipi:
    src: int
    dst: int
    vector: int
    payload: object = None

    def __post_init__(self):
        if self.src == self.dst:
            raise ValueError("IPI source and destination must differ")


class Demux(str, Enum):
    HANDLE = "handle"
    DISCARD = "discard"


def _norm(dest) -> Destinations:
    if dest == BROADCAST_ALL:
        return BROADCAST_ALL
    return frozenset(int(d) for d in dest)


class IoApic:
    """Redirection table plus a delivery hook into the sandboxes."""

    def __init__(self, engine: Engine, sandbox_ids: Callable[[], Iterable[int]],
                 delivery_latency: int = 100):
        self.engine = engine
        self.sandbox_ids = sandbox_ids
        self.delivery_latency = delivery_latency
        self.table: dict[int, RedirectionEntry] = {}
        self.on_deliver: Optional[Callable[[int, int, object], None]] = None
        self._monitor_tokens: set[int] = set()
        self._grants: set[RedirectGrant] = set()

    def register_monitor(self, token: MonitorToken) -> None:
        self._monitor_tokens.add(id(token))

    def grant(self, token: MonitorToken, sandbox: int, vector: int) -> RedirectGrant:
        """A monitor lets its own sandbox reprogram ``vector``."""
        self._require_monitor(token)
        if token.sandbox != sandbox:
            raise CapabilityError("a monitor can only grant capabilities to its own sandbox")
        g = RedirectGrant(sandbox, vector)
        self._grants.add(g)
        self.engine.record(sandbox, "apic_grant", vector=vector)
        return g

    def _require_monitor(self, token):
        if not isinstance(token, MonitorToken) or id(token) not in self._monitor_tokens:
            raise CapabilityError("operation requires a monitor capability")

    def program(self, vector: int, destinations, token: MonitorToken) -> RedirectionEntry:
        self._require_monitor(token)
        entry = RedirectionEntry(vector, _norm(destinations))
        self.table[vector] = entry
        return entry

    def resolve(self, vector: int) -> list[int]:
        entry = self.table.get(vector)
        if entry is None:
            return []
        if entry.destinations == BROADCAST_ALL:
            return sorted(self.sandbox_ids())
        return sorted(entry.destinations)

    def raise_irq(self, vector: int, context=None) -> list[int]:
        """Schedule one delivery per destination. No monitor is involved."""
        if vector not in self.table:
            self.engine.record(None, "irq_unknown_vector", vector=vector)
            return []
        dests = self.resolve(vector)
        self.engine.record(None, "irq_raise", vector=vector, deliveries=len(dests))
        ids = []
        for sid in dests:
            ids.append(self.engine.after(
                self.delivery_latency, self._make_delivery(sid, vector, context),
                EventKind.INTERRUPT, str(sid)))
        return ids

    def _make_delivery(self, sid, vector, context):
        def deliver(ev):
            if self.on_deliver is not None:
                self.on_deliver(sid, vector, context)
        return deliver

    def redirect(self, vector: int, destinations, capability) -> RedirectionEntry:
        """Atomically replace the destination set of ``vector``."""
        if isinstance(capability, RedirectGrant):
            if capability not in self._grants or capability.vector != vector:
                raise CapabilityError("grant does not cover this vector")
            who = capability.sandbox
        elif isinstance(capability, MonitorToken) and id(capability) in self._monitor_tokens:
            who = f"monitor{capability.sandbox}"
        else:
            raise CapabilityError("redirect requires a monitor token or a granted capability")
        if vector not in self.table:
            raise SimError(f"vector {vector:#x} is not programmed")
        entry = RedirectionEntry(vector, _norm(destinations))
        self.table[vector] = entry
        dest_txt = entry.destinations if entry.destinations == BROADCAST_ALL else \
            "|".join(str(d) for d in sorted(entry.destinations))
        self.engine.record(None, "irq_redirect", vector=vector, by=who, dest=dest_txt)
        return entry


def send_ipi(engine: Engine, ipi: Ipi, round_trip: int, dst_alive: bool,
             on_deliver: Callable[[Ipi], None] | None = None,
             on_ack: Callable[[Ipi], None] | None = None) -> SimTime:
    """Deliver ``ipi`` and return the acknowledgement time.

    The request leg takes ceil(round_trip / 2) cycles and the ack the rest, so
    one round trip costs exactly ``round_trip``. An IPI to a halted sandbox is
    traced as lost and never acknowledged.
    """
    req = (round_trip + 1) // 2
    ack = round_trip - req
    engine.record(ipi.src, "ipi_send", dst=ipi.dst, vector=ipi.vector,
                  payload=getattr(ipi.payload, "tag", ipi.payload))
    if not dst_alive:
        engine.record(ipi.dst, "ipi_lost", src=ipi.src, vector=ipi.vector)
        return engine.now

    def delivered(ev):
        engine.record(ipi.dst, "ipi_deliver", src=ipi.src, vector=ipi.vector)
        if on_deliver is not None:
            on_deliver(ipi)
        engine.after(ack, acked, EventKind.IPI, str(ipi.src))

    def acked(ev):
        engine.record(ipi.src, "ipi_ack", dst=ipi.dst, vector=ipi.vector)
        if on_ack is not None:
            on_ack(ipi)

    engine.after(req, delivered, EventKind.IPI, str(ipi.dst))
    return engine.now + round_trip


def early_demux(has_driver: bool, local_ips: Iterable, packet) -> Demux:
    """Driver-level check: is this interrupt's packet addressed to us?"""
    if not has_driver:
        return Demux.DISCARD
    dst = getattr(packet, "dst_ip", None)
    return Demux.HANDLE if dst is not None and dst in set(local_ips) else Demux.DISCARD
