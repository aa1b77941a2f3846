import pytest

from mksim.machine import Machine, Params
from mksim.memory import MB, LayoutSizes

MS = 2_000_000
SMALL = LayoutSizes(host=256 * MB)


def make_machine(n=2, params=None, costs=None, launch=True, vcpu=(5 * MS, 10 * MS)):
    """A machine with one main VCPU per sandbox, launched."""
    m = Machine(n, params=params or Params(), costs=costs, layout=SMALL)
    for sid in range(n):
        m.add_main_vcpu(sid, *vcpu)
    if launch:
        m.launch_all()
    return m


@pytest.fixture
def machine2():
    return make_machine(2)
