import pytest

from mksim.errors import StateError
from mksim.machine import Machine
from mksim.memory import MB, Access, LayoutSizes
from mksim.sandbox import (CostModel, ExitReason, MonitorAction, MonitorPolicy, SandboxState,
                           monitor_handle)

SMALL = LayoutSizes(host=256 * MB)


def _machine(n=2):
    return Machine(n, layout=SMALL)


def test_fresh_launch():
    m = _machine(1)
    m.launch(0)
    sb = m.sandboxes[0]
    assert sb.state is SandboxState.RUNNING
    assert sb.vm_exit_count == 0


def test_four_independent_schedulers():
    m = _machine(4)
    m.launch_all()
    assert len({id(s) for s in m.schedulers.values()}) == 4
    assert not any(s.suspended for s in m.schedulers.values())
    m.sandboxes[2].halt()
    assert m.schedulers[2].suspended
    assert not m.schedulers[1].suspended


def test_relaunch_after_halt_and_double_launch():
    m = _machine(1)
    m.launch(0)
    with pytest.raises(StateError):
        m.launch(0)
    m.sandboxes[0].halt()
    m.launch(0)
    assert m.sandboxes[0].launches == 2


def test_ept_violation_reaches_monitor():
    m = _machine(2)
    m.launch_all()
    seen = []
    m.trap_handler = lambda sid: seen.append((sid, m.monitors[sid].pending_trap,
                                              m.monitors[sid].trap_reason))
    res = m.guest_access(0, m.alias_gpa_of(1), Access.WRITE, data=b"x")
    assert not res.ok
    m.run()
    assert len(seen) == 1
    sid, trap, reason = seen[0]
    assert sid == 0 and trap.gpa == m.alias_gpa_of(1)
    assert reason is ExitReason.EPT_VIOLATION
    assert m.engine.now == 707


def test_forced_exit_takes_same_path():
    m = _machine(1)
    m.launch_all()
    seen = []
    m.trap_handler = lambda sid: seen.append(m.monitors[sid].trap_reason)
    m.trap(0, ExitReason.FORCED)
    m.run()
    assert seen == [ExitReason.FORCED]
    exits = [r for r in m.engine.trace if r.event_type == "vm_exit"]
    assert exits[0].get("reason") == "forced"


def test_exit_enter_round_trip_costs_1530():
    m = _machine(1)
    m.launch_all()
    sb = m.sandboxes[0]
    sb.vm_exit(ExitReason.FORCED, then=lambda: sb.vm_enter())
    m.run()
    assert m.engine.now == 707 + 823 == 1530
    assert sb.state is SandboxState.RUNNING
    assert sb.time_trapped == 1530


def test_enter_without_launch_is_an_error():
    m = _machine(1)
    with pytest.raises(StateError):
        m.sandboxes[0].vm_enter()
    with pytest.raises(StateError):
        m.sandboxes[0].vm_exit(ExitReason.FORCED)


@pytest.mark.parametrize("policy,attributed,action", [
    (MonitorPolicy.LOCAL, True, MonitorAction.LOCAL_RECOVER),
    (MonitorPolicy.REMOTE, True, MonitorAction.REMOTE_RECOVER),
    (MonitorPolicy.HALT, True, MonitorAction.HALT),
    (MonitorPolicy.LOCAL, False, MonitorAction.HALT),
])
def test_monitor_decisions(policy, attributed, action):
    m = _machine(1)
    mon = m.monitors[0]
    mon.recovery_policy = policy
    mon.trap_reason = ExitReason.FORCED
    assert monitor_handle(mon, m.engine, attributed) is action
    assert mon.trap_reason is None
    with pytest.raises(StateError):
        monitor_handle(mon, m.engine)


def test_unattributed_violation_halts_only_that_sandbox():
    m = _machine(3)
    m.launch_all()
    before = {s: m.kernel_digest(s) for s in (1, 2)}
    for victim in (1, 2):
        m.guest_access(0, m.alias_gpa_of(victim, 0x40), Access.WRITE, data=b"\xcc" * 16)
    m.run()
    assert m.sandboxes[0].state is SandboxState.HALTED
    assert m.sandboxes[1].running and m.sandboxes[2].running
    assert {s: m.kernel_digest(s) for s in (1, 2)} == before


def test_cost_model_overrides():
    c = CostModel().replace(vm_exit=1)
    assert c.vm_exit == 1 and c.vm_enter == 823
    assert c.ipi_request + c.ipi_ack == c.ipi_round_trip == 1291
    with pytest.raises(ValueError):
        CostModel().replace(bogus=1)
    with pytest.raises(ValueError):
        CostModel(vm_exit=-1)
