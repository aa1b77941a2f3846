import pytest

from conftest import MS, make_machine
from mksim.devices import DriverState, IcmpGenerator, IcmpPacket, Implementation
from mksim.errors import SimError, StateError
from mksim.memory import Access

SRC = "192.168.1.100"


def _net(n=4, sharers=(0, 1, 2, 3), broadcast=True):
    m = make_machine(n)
    m.net.add_device("nic0", 0x21, list(sharers), broadcast=broadcast)
    for sid in sharers:
        m.net.add_vif("nic0", sid, f"10.0.0.{sid + 1}")
    replies = []
    m.net.listen(SRC, replies.append)
    return m, replies


def _ping(m, dst, seq=1, at=0):
    pkt = IcmpPacket("request", seq, SRC, dst, at)
    m.engine.at(at, lambda ev: m.net.nic_rx("nic0", pkt))


def test_one_handle_three_discards():
    m, replies = _net()
    _ping(m, "10.0.0.1")
    m.run()
    assert m.net.handled == {0: 1}
    assert m.net.discarded == {1: 1, 2: 1, 3: 1}
    assert [(r.seq, r.handled_by) for r in replies] == [(1, 0)]


def test_unknown_ip_discarded_everywhere():
    m, replies = _net()
    _ping(m, "10.9.9.9")
    m.run()
    assert m.net.handled == {}
    assert sum(m.net.discarded.values()) == 4
    assert replies == []


def test_interleaved_floods_handled_by_owner():
    m, replies = _net(2, sharers=(0, 1))
    for i in range(200):
        _ping(m, f"10.0.0.{i % 2 + 1}", seq=i, at=i * 3000)
    m.run()
    assert m.net.handled == {0: 100, 1: 100}
    assert all(r.handled_by == r.seq % 2 for r in replies)
    assert len(replies) == 200


def test_healthy_reply_keeps_seq():
    m, replies = _net()
    _ping(m, "10.0.0.1", seq=7)
    m.run()
    assert replies[0].seq == 7 and replies[0].kind == "reply"
    assert replies[0].dst_ip == SRC


def test_corrupted_driver_drops_and_generator_notices():
    m, replies = _net()
    m.net.corrupt_driver(m.net.instance("nic0", 0))
    gen = IcmpGenerator(m.net, "nic0", "10.0.0.1", 10 * MS, count=3)
    m.run()
    assert gen.replies == [] and gen.missed == [1, 2, 3]
    assert sum(1 for r in m.engine.trace if r.event_type == "icmp_drop") == 3


@pytest.mark.parametrize("gap", range(0, 12_000, 400))
def test_shared_lock_delays_but_never_loses(gap):
    m, replies = _net(2, sharers=(0, 1), broadcast=False)
    _ping(m, "10.0.0.1", seq=1, at=0)
    _ping(m, "10.0.0.2", seq=2, at=gap)
    m.run()
    assert sorted(r.seq for r in replies) == [1, 2]
    holder = None
    for r in m.engine.trace:
        if r.event_type == "lock_acquire":
            assert holder is None
            holder = r.sandbox
        elif r.event_type == "lock_release":
            assert holder == r.sandbox
            holder = None
    if gap < m.params.icmp_service:
        assert any(r.event_type == "lock_wait" for r in m.engine.trace)


def test_blast_on_own_channel_corrupts_it():
    m, _ = _net()
    chan = m.ipc.create_channel(0, 1, chan_id="c")
    inst = m.net.instance("nic0", 0)
    violations, written = m.net.corrupt_driver(inst, [(chan.buffer_gpa, b"\xcc" * 64)])
    assert violations == [] and written == [(chan.buffer_gpa, 64)]
    assert m.host.read(chan.buffer_gpa, 64) == b"\xcc" * 64


def test_blast_at_other_kernel_is_contained():
    m, _ = _net()
    before = m.kernel_digest(2)
    inst = m.net.instance("nic0", 0)
    violations, written = m.net.corrupt_driver(inst, [(m.alias_gpa_of(2), b"\xcc" * 8192)])
    assert len(violations) == 2 and written == []
    assert m.kernel_digest(2) == before
    assert inst.state is DriverState.CORRUPTED


def test_empty_blast_only_flips_state():
    m, _ = _net()
    inst = m.net.instance("nic0", 0)
    before = {s: m.kernel_digest(s) for s in range(4)}
    assert m.net.corrupt_driver(inst, []) == ([], [])
    assert inst.state is DriverState.CORRUPTED
    assert {s: m.kernel_digest(s) for s in range(4)} == before


def test_reinit_phases_and_switch():
    m, _ = _net()
    inst = m.net.instance("nic0", 0)
    with pytest.raises(StateError):
        m.net.driver_reinit(inst)
    m.net.corrupt_driver(inst)
    phases = []
    done_at = m.net.driver_reinit(inst, on_phase=lambda n, c: phases.append((n, c)))
    with pytest.raises(StateError):
        m.net.driver_reinit(inst)
    m.run()
    assert phases == [("driver_reinit", 134_244_605), ("network_reinit", 68_750_060)]
    assert done_at == m.engine.now == 134_244_605 + 68_750_060
    assert inst.healthy and inst.implementation is Implementation.PRIMARY
    m.net.corrupt_driver(inst)
    m.net.driver_reinit(inst, switch_implementation=True)
    m.run()
    assert inst.implementation is Implementation.ALTERNATE


def test_private_data_restored_after_reinit():
    m, _ = _net()
    inst = m.net.instance("nic0", 0)
    blob = m.host.read(inst.private_data_hpa.start, 64)
    m.net.corrupt_driver(inst, [(inst.private_data_gpa, b"\x00" * 64)])
    assert m.host.read(inst.private_data_hpa.start, 64) != blob
    m.net.driver_reinit(inst)
    m.run()
    assert m.host.read(inst.private_data_hpa.start, 4) == blob[:4]


def test_device_setup_errors():
    m, _ = _net()
    with pytest.raises(SimError):
        m.net.add_device("nic0", 0x22, [0])
    with pytest.raises(SimError):
        m.net.add_device("nic1", 0x22, [])
    with pytest.raises(SimError):
        m.net.add_vif("nic0", 1, "10.0.0.1")
    with pytest.raises(ValueError):
        IcmpGenerator(m.net, "nic0", "10.0.0.1", 10)


def test_lock_byte_is_guest_visible():
    m, _ = _net()
    dev = m.net.devices["nic0"]
    for sid in range(4):
        assert m.guest_access(sid, dev.shared_lock_gpa, Access.READ, 1).data == b"\x00"
