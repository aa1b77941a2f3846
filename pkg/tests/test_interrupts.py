import pytest

from mksim.engine import Engine
from mksim.errors import CapabilityError, SimError
from mksim.interrupts import (BROADCAST_ALL, Demux, Ipi, IoApic, RedirectGrant, early_demux,
                              send_ipi)
from mksim.memory import MonitorToken


def _apic(n=4):
    eng = Engine()
    apic = IoApic(eng, lambda: range(n), delivery_latency=10)
    tokens = [MonitorToken(i) for i in range(n)]
    for t in tokens:
        apic.register_monitor(t)
    got = []
    apic.on_deliver = lambda sid, vec, ctx: got.append((eng.now, sid, vec))
    return eng, apic, tokens, got


def test_single_destination():
    eng, apic, tokens, got = _apic()
    apic.program(0x20, {0}, tokens[0])
    apic.raise_irq(0x20)
    eng.run()
    assert got == [(10, 0, 0x20)]


def test_broadcast_reaches_everyone():
    eng, apic, tokens, got = _apic()
    apic.program(0x21, BROADCAST_ALL, tokens[0])
    assert len(apic.raise_irq(0x21)) == 4
    eng.run()
    assert sorted(s for _, s, _ in got) == [0, 1, 2, 3]


def test_unknown_vector_warns():
    eng, apic, tokens, got = _apic()
    assert apic.raise_irq(0x99) == []
    eng.run()
    assert got == []
    assert [r.event_type for r in eng.trace] == ["irq_unknown_vector"]


def test_programming_needs_monitor_token():
    eng, apic, tokens, got = _apic()
    with pytest.raises(CapabilityError):
        apic.program(0x20, {0}, MonitorToken(0))
    with pytest.raises(ValueError):
        apic.program(0x20, set(), tokens[0])


def test_granted_redirect_moves_delivery():
    eng, apic, tokens, got = _apic()
    apic.program(0x20, {0}, tokens[0])
    grant = apic.grant(tokens[1], 1, 0x20)
    apic.redirect(0x20, {1}, grant)
    apic.raise_irq(0x20)
    eng.run()
    assert [s for _, s, _ in got] == [1]


def test_ungranted_redirect_rejected():
    eng, apic, tokens, got = _apic()
    apic.program(0x20, {0}, tokens[0])
    with pytest.raises(CapabilityError):
        apic.redirect(0x20, {2}, RedirectGrant(2, 0x20))
    with pytest.raises(CapabilityError):
        apic.redirect(0x20, {2}, "please")
    grant = apic.grant(tokens[2], 2, 0x21)
    with pytest.raises(CapabilityError):
        apic.redirect(0x20, {2}, grant)
    with pytest.raises(CapabilityError):
        apic.grant(tokens[1], 2, 0x20)
    with pytest.raises(SimError):
        apic.redirect(0x30, {2}, apic.grant(tokens[2], 2, 0x30))


@pytest.mark.parametrize("n", [1, 2, 4, 7])
def test_redirect_to_broadcast_counts(n):
    eng, apic, tokens, got = _apic(n)
    apic.program(0x20, {0}, tokens[0])
    apic.redirect(0x20, BROADCAST_ALL, tokens[0])
    for _ in range(3):
        apic.raise_irq(0x20)
    eng.run()
    assert len(got) == 3 * n


def test_ipi_round_trip_costs_1291():
    eng = Engine()
    seen = []
    ack_at = send_ipi(eng, Ipi(0, 1, 0xF0), 1291, True,
                      on_deliver=lambda ipi: seen.append(("deliver", eng.now)),
                      on_ack=lambda ipi: seen.append(("ack", eng.now)))
    eng.run()
    assert ack_at == 1291
    assert seen == [("deliver", 646), ("ack", 1291)]
    assert eng.now == 1291


def test_ipi_to_halted_is_lost():
    eng = Engine()
    seen = []
    send_ipi(eng, Ipi(0, 1, 0xF0), 1291, False, on_deliver=seen.append, on_ack=seen.append)
    eng.run()
    assert seen == []
    assert [r.event_type for r in eng.trace] == ["ipi_send", "ipi_lost"]
    with pytest.raises(ValueError):
        Ipi(1, 1, 0xF0)


class _Pkt:
    def __init__(self, dst_ip):
        self.dst_ip = dst_ip


def test_early_demux():
    assert early_demux(True, ["10.0.0.1"], _Pkt("10.0.0.1")) is Demux.HANDLE
    assert early_demux(True, ["10.0.0.1"], _Pkt("10.0.0.2")) is Demux.DISCARD
    assert early_demux(False, ["10.0.0.1"], _Pkt("10.0.0.1")) is Demux.DISCARD
    assert early_demux(True, ["10.0.0.1"], None) is Demux.DISCARD


def test_broadcast_counting_oracle():
    eng, apic, tokens, got = _apic(4)
    apic.program(0x21, BROADCAST_ALL, tokens[0])
    verdicts = {Demux.HANDLE: 0, Demux.DISCARD: 0}
    apic.on_deliver = lambda sid, vec, pkt: verdicts.__setitem__(
        v := early_demux(True, ["10.0.0.1"] if sid == 0 else [f"10.0.0.{sid + 1}0"], pkt),
        verdicts[v] + 1)
    for _ in range(30000):
        apic.raise_irq(0x21, _Pkt("10.0.0.1"))
    eng.run()
    assert verdicts == {Demux.HANDLE: 30000, Demux.DISCARD: 90000}
