"""Shared-memory mailbox channels between sandboxes.

Mailbox layout (one 4096-byte page, little endian)::

    offset 0   status   1 byte   0 = empty, 1 = full
    offset 1   length   4 bytes  payload bytes in this chunk
    offset 5   seq      4 bytes  chunk sequence number, per sending sandbox
    offset 9   payload  up to 4087 bytes

A message longer than one mailbox goes out as a run of full chunks; the
first chunk shorter than 4087 bytes ends it. A message whose length is a
multiple of 4087 therefore ends with an empty chunk, and a message of
``n`` bytes always takes ``n // 4087 + 1`` chunks.

Both ends busy-poll the status byte. Polls and copies are work items on the
thread's VCPU, so VCPU budgets bound channel throughput.
"""

from __future__ import annotations

import math
from collections import deque
import struct
from dataclasses import dataclass, field
from typing import Callable, Optional

from .errors import ChannelError
from .memory import PAGE_SIZE, Access, Perm

MAILBOX_SIZE = PAGE_SIZE
STATUS_OFFSET = 0
LENGTH_OFFSET = 1
SEQ_OFFSET = 5
PAYLOAD_OFFSET = 9
MAX_PAYLOAD = MAILBOX_SIZE - PAYLOAD_OFFSET   # 4087

EMPTY = 0
FULL = 1

_HEADER = struct.Struct("<II")


def chunk_count(n: int) -> int:
    return n // MAX_PAYLOAD + 1


def split_chunks(data: bytes) -> list[bytes]:
    return [data[i * MAX_PAYLOAD:(i + 1) * MAX_PAYLOAD] for i in range(chunk_count(len(data)))]


def pack_chunk(seq: int, payload: bytes) -> bytes:
    """Bytes for offsets 1.. of the mailbox (everything except status)."""
    if len(payload) > MAX_PAYLOAD:
        raise ValueError("chunk payload too large")
    return _HEADER.pack(len(payload), seq) + payload


def unpack_header(page: bytes) -> tuple[int, int, int]:
    """Return ``(status, length, seq)`` from the start of a mailbox."""
    length, seq = _HEADER.unpack_from(page, LENGTH_OFFSET)
    return page[STATUS_OFFSET], length, seq


@dataclass
class Message:
    seq: int
    data: bytes


@dataclass
class Channel:
    id: str
    endpoints: tuple[int, int]
    buffer_gpa: int
    private: bool = False
    alive: bool = True
    generation: int = 0
    next_seq: dict = field(default_factory=dict)
    waiters: list = field(default_factory=list)
    inflight: dict = field(default_factory=dict)   # first chunk seq -> send start

    def peer(self, sid: int) -> int:
        a, b = self.endpoints
        return b if sid == a else a

    def notify(self) -> None:
        waiters, self.waiters = self.waiters, []
        for w in waiters:
            w()


class ChannelManager:
    """Allocates mailbox slots in the shared region and wires EPT access."""

    # first page of the shared region holds device locks
    RESERVED_PAGES = 1

    def __init__(self, machine):
        self.m = machine
        shared = machine.layout.shared
        self.slots = [shared.start + i * PAGE_SIZE
                      for i in range(self.RESERVED_PAGES, shared.size // PAGE_SIZE)]
        self.free = list(self.slots)
        self.channels: dict[str, Channel] = {}
        self.lock_base = shared.start
        self._lock_next = 0

    def alloc_lock_byte(self) -> int:
        if self._lock_next >= PAGE_SIZE * self.RESERVED_PAGES:
            raise ChannelError("no room left for shared locks")
        gpa = self.lock_base + self._lock_next
        self._lock_next += 1
        return gpa

    def create_channel(self, a: int, b: int, private: bool = False,
                       chan_id: str | None = None) -> Channel:
        if a == b:
            raise ChannelError("a channel needs two distinct sandboxes")
        for s in (a, b):
            if s not in self.m.sandboxes:
                raise ChannelError(f"unknown sandbox {s}")
        if not self.free:
            raise ChannelError("shared region has no free mailbox slot")
        gpa = self.free.pop(0)
        chan_id = chan_id or f"ch{len(self.channels)}"
        chan = self.channels.get(chan_id)
        if chan is None:
            chan = Channel(chan_id, (a, b), gpa, private)
            self.channels[chan_id] = chan
        else:
            chan.buffer_gpa, chan.private, chan.alive = gpa, private, True
            chan.generation += 1
        self._setup_mapping(chan)
        self.m.host.write(gpa, bytes(MAILBOX_SIZE))
        for s in (a, b):
            if chan_id not in self.m.sandboxes[s].channels:
                self.m.sandboxes[s].channels.append(chan_id)
        self.m.engine.record(None, "channel_create", chan=chan_id, a=a, b=b,
                             private=private, gpa=f"{gpa:#x}", gen=chan.generation)
        return chan

    def _setup_mapping(self, chan: Channel) -> None:
        # Monitors edit their own tables with their own tokens.
        for sid, mon in self.m.monitors.items():
            if sid in chan.endpoints or not chan.private:
                mon.ept.map(chan.buffer_gpa, chan.buffer_gpa, Perm.RW, 1, mon.token)
            else:
                mon.ept.unmap(chan.buffer_gpa, 1, mon.token)

    def destroy(self, chan: Channel) -> None:
        if not chan.alive:
            return
        chan.alive = False
        chan.generation += 1
        gpa = chan.buffer_gpa
        for sid, mon in self.m.monitors.items():
            mon.ept.map(gpa, gpa, Perm.RW, 1, mon.token)
        self.m.host.write(gpa, bytes(MAILBOX_SIZE))
        self.free.append(gpa)
        self.free.sort()
        self.m.engine.record(None, "channel_destroy", chan=chan.id)
        chan.notify()

    def restore(self, chan: Channel) -> Channel:
        """Re-create a damaged channel on a fresh slot, same id and endpoints."""
        old = chan.buffer_gpa
        was_alive = chan.alive
        chan.alive = False
        chan.generation += 1
        chan.notify()
        self.create_channel(*chan.endpoints, private=chan.private, chan_id=chan.id)
        if was_alive:
            for sid, mon in self.m.monitors.items():
                mon.ept.map(old, old, Perm.RW, 1, mon.token)
            self.m.host.write(old, bytes(MAILBOX_SIZE))
            self.free.append(old)
            self.free.sort()
        self.m.engine.record(None, "channel_restore", chan=chan.id, gpa=f"{chan.buffer_gpa:#x}")
        return chan

    def endpoint(self, chan: Channel, sid: int, vcpu) -> "Endpoint":
        return Endpoint(self, chan, sid, vcpu)


class Endpoint:
    """A kernel thread in ``sid`` bound to ``vcpu`` that uses one channel."""

    def __init__(self, mgr: ChannelManager, chan: Channel, sid: int, vcpu):
        self.mgr = mgr
        self.m = mgr.m
        self.chan = chan
        self.sid = sid
        self.vcpu = vcpu
        self.sched = self.m.schedulers[sid]
        self._partial: list[bytes] = []
        self._partial_seq: Optional[int] = None
        self._sendq: deque = deque()

    # -- helpers ----------------------------------------------------------

    def _copy_cycles(self, n: int) -> int:
        return math.ceil(n / self.m.params.copy_rate)

    def _status(self) -> Optional[int]:
        res = self.m.guest_access(self.sid, self.chan.buffer_gpa, Access.READ, 1)
        return None if not res.ok else res.data[0]

    def _header(self) -> Optional[tuple[int, int, int]]:
        res = self.m.guest_access(self.sid, self.chan.buffer_gpa, Access.READ, PAYLOAD_OFFSET)
        return None if not res.ok else unpack_header(res.data)

    def _record(self, event_type, **detail):
        self.m.engine.record(self.sid, event_type, chan=self.chan.id, **detail)

    def _spin(self, want: int, cost, then: Callable[[], None]) -> None:
        """Busy-wait until the status byte reads ``want``, then pay ``cost``.

        ``cost`` may be a callable evaluated at wake-up, for work whose size
        is only known once the peer has written.
        """
        item = self.sched.submit(self.vcpu, None, then, label="spin")
        chan = self.chan
        gen = chan.generation

        def wake():
            if item.cancelled:
                return
            if chan.generation != gen:
                self.sched.cancel(item)
                then()
                return
            if self.m.host.read(chan.buffer_gpa, 1)[0] != want:
                chan.waiters.append(wake)
                return
            self.sched.finish_spin(item, cost() if callable(cost) else cost)

        chan.waiters.append(wake)

    # -- sending ----------------------------------------------------------

    def send(self, data: bytes, on_complete: Callable | None = None,
             on_abort: Callable | None = None) -> int:
        """Blocking send, chunk by chunk. Returns the message's first seq.

        Sends issued while another is in progress wait their turn, as they
        would behind a blocked thread.
        """
        chan = self.chan
        if self.sid not in chan.endpoints:
            raise ChannelError(f"sandbox {self.sid} is not an endpoint of {chan.id}")
        chunks = split_chunks(data)
        first = chan.next_seq.get(self.sid, 1)
        chan.next_seq[self.sid] = first + len(chunks)
        self._sendq.append((data, chunks, first, on_complete, on_abort))
        if len(self._sendq) == 1:
            self._start_send()
        return first

    def _send_finished(self) -> None:
        self._sendq.popleft()
        if self._sendq:
            self._start_send()

    def _start_send(self) -> None:
        data, chunks, first, on_complete, on_abort = self._sendq[0]
        chan = self.chan
        gen = chan.generation
        chan.inflight[first] = self.m.engine.now
        self._record("msg_send_start", seq=first, size=len(data), chunks=len(chunks))
        state = {"i": 0}

        def aborted():
            chan.inflight.pop(first, None)
            self._record("msg_send_aborted", seq=first)
            self._send_finished()
            if on_abort:
                on_abort(first)

        def attempt():
            if not chan.alive or chan.generation != gen:
                return aborted()
            status = self._status()
            if status is None:
                return aborted()
            payload = chunks[state["i"]]
            cost = self.m.params.poll_cost + self._copy_cycles(len(payload))
            if status == EMPTY:
                self.sched.submit(self.vcpu, cost, write, label="msg_write")
            else:
                self._spin(EMPTY, cost, write)

        def write():
            if not chan.alive or chan.generation != gen:
                return aborted()
            i = state["i"]
            payload = chunks[i]
            if self.m.host.read(chan.buffer_gpa, 1)[0] != EMPTY:
                # another writer got in first
                cost = self.m.params.poll_cost + self._copy_cycles(len(payload))
                return self._spin(EMPTY, cost, write)
            seq = first + i
            res = self.m.guest_access(self.sid, chan.buffer_gpa + LENGTH_OFFSET, Access.WRITE,
                                      data=pack_chunk(seq, payload))
            if not res.ok:
                return aborted()
            self.m.guest_access(self.sid, chan.buffer_gpa, Access.WRITE, data=bytes([FULL]))
            if self.m.params.trace_chunks:
                self._record("msg_chunk", seq=seq, length=len(payload))
            chan.notify()
            state["i"] += 1
            if state["i"] < len(chunks):
                attempt()
            else:
                self._send_finished()
                if on_complete:
                    on_complete(first)

        attempt()

    def try_send(self, data: bytes, on_done: Callable | None = None) -> None:
        """One poll of the status byte; write a single-chunk message if empty.

        ``on_done(seq or None)`` reports whether the message went out.
        """
        chan = self.chan
        if len(data) >= MAX_PAYLOAD:
            raise ChannelError("try_send carries single-chunk messages only")
        gen = chan.generation

        def polled():
            if not chan.alive or chan.generation != gen or not self.m.sandboxes[self.sid].running:
                return on_done and on_done(None)
            status = self._status()
            if status != EMPTY:
                self._record("msg_send_skip", status="-" if status is None else status)
                return on_done and on_done(None)
            self.sched.submit(self.vcpu, self._copy_cycles(len(data)), write, label="msg_write")

        def write():
            if not chan.alive or chan.generation != gen:
                return on_done and on_done(None)
            seq = chan.next_seq.get(self.sid, 1)
            chan.next_seq[self.sid] = seq + 1
            chan.inflight[seq] = self.m.engine.now
            self._record("msg_send_start", seq=seq, size=len(data), chunks=1)
            self.m.guest_access(self.sid, chan.buffer_gpa + LENGTH_OFFSET, Access.WRITE,
                                data=pack_chunk(seq, data))
            self.m.guest_access(self.sid, chan.buffer_gpa, Access.WRITE, data=bytes([FULL]))
            if self.m.params.trace_chunks:
                self._record("msg_chunk", seq=seq, length=len(data))
            chan.notify()
            if on_done:
                on_done(seq)

        self.sched.submit(self.vcpu, self.m.params.poll_cost, polled, label="msg_poll")

    # -- receiving --------------------------------------------------------

    def _take_chunk(self) -> Optional[tuple[int, bytes]]:
        """Copy the mailbox out and flip status back to empty."""
        chan = self.chan
        # one read of the whole mailbox; the header says how much is payload
        got = self.m.guest_access(self.sid, chan.buffer_gpa, Access.READ, MAILBOX_SIZE)
        if not got.ok:
            return None
        status, length, seq = unpack_header(got.data)
        if status != FULL or length > MAX_PAYLOAD:
            return None
        payload = got.data[PAYLOAD_OFFSET:PAYLOAD_OFFSET + length]
        self.m.guest_access(self.sid, chan.buffer_gpa, Access.WRITE, data=bytes([EMPTY]))
        chan.notify()
        return seq, payload

    def _absorb(self, seq: int, payload: bytes) -> Optional[Message]:
        if self._partial_seq is None:
            self._partial_seq = seq
        self._partial.append(payload)
        if len(payload) == MAX_PAYLOAD:
            return None
        msg = Message(self._partial_seq, b"".join(self._partial))
        self._partial, self._partial_seq = [], None
        start = self.chan.inflight.pop(msg.seq, None)
        cycles = "-" if start is None else self.m.engine.now - start
        self._record("msg_recv_done", seq=msg.seq, size=len(msg.data), cycles=cycles)
        return msg

    def _peek_length(self) -> int:
        head = self._header()
        return 0 if head is None else min(head[1], MAX_PAYLOAD)

    def poll_recv(self, on_result: Callable[[Optional[Message]], None]) -> None:
        """Single non-blocking poll. Reports a completed Message or None."""
        chan = self.chan

        def polled():
            if not chan.alive or not self.m.sandboxes[self.sid].running:
                return on_result(None)
            head = self._header()
            if head is None or head[0] != FULL:
                return on_result(None)
            cost = self._copy_cycles(min(head[1], MAX_PAYLOAD))
            self.sched.submit(self.vcpu, cost, copied, label="msg_copy")

        def copied():
            got = self._take_chunk() if chan.alive else None
            if got is None:
                return on_result(None)
            on_result(self._absorb(*got))

        self.sched.submit(self.vcpu, self.m.params.poll_cost, polled, label="msg_poll")

    def recv(self, on_message: Callable[[Message], None]) -> None:
        """Blocking receive of one whole message, spinning while empty."""
        chan = self.chan
        gen = chan.generation

        def attempt():
            if not chan.alive or chan.generation != gen:
                self._record("msg_recv_aborted")
                return
            head = self._header()
            if head is not None and head[0] == FULL:
                cost = self.m.params.poll_cost + self._copy_cycles(min(head[1], MAX_PAYLOAD))
                self.sched.submit(self.vcpu, cost, copied, label="msg_copy")
            else:
                self._spin(FULL, lambda: self.m.params.poll_cost
                           + self._copy_cycles(self._peek_length()), copied)

        def copied():
            got = self._take_chunk()
            if got is None:
                return attempt()
            msg = self._absorb(*got)
            if msg is None:
                attempt()
            else:
                on_message(msg)

        attempt()
