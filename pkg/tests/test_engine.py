import hashlib

import pytest
from hypothesis import given, strategies as st

from mksim.engine import (Engine, Event, EventKind, SimConfig, TraceRecord, cycles_from_millis,
                          millis_from_cycles, read_trace_csv, trace_to_csv)
from mksim.errors import PastEventError, TimeOverflowError


def test_first_event_gets_id_one():
    eng = Engine()
    assert eng.schedule(Event(0)) == 1


def test_same_time_events_run_in_insertion_order():
    eng = Engine()
    seen = []
    a = eng.at(5, lambda ev: seen.append(ev.id))
    b = eng.at(5, lambda ev: seen.append(ev.id))
    eng.run()
    assert (a, b) == (1, 2)
    assert seen == [1, 2]


def test_scheduling_in_the_past_is_rejected():
    eng = Engine()
    eng.at(20)
    eng.run()
    assert eng.now == 20
    with pytest.raises(PastEventError):
        eng.at(10)


def test_time_overflow_rejected():
    eng = Engine()
    with pytest.raises(TimeOverflowError):
        eng.at(2**64)


def test_run_until_on_empty_queue_advances_clock():
    eng = Engine()
    assert eng.run_until(100) == []
    assert eng.now == 100


def test_run_until_returns_records_in_window():
    eng = Engine()
    eng.at(50, lambda ev: eng.record(0, "tick"))
    eng.at(150, lambda ev: eng.record(0, "late"))
    recs = eng.run_until(100)
    assert [(r.at, r.event_type) for r in recs] == [(50, "tick")]
    assert eng.now == 100


def test_cancelled_event_never_fires():
    eng = Engine()
    fired = []
    i = eng.at(10, lambda ev: fired.append(1))
    eng.cancel(i)
    eng.run()
    assert fired == []
    assert eng.pending() == 0


def test_horizon_stops_run():
    eng = Engine(SimConfig(horizon=100))
    fired = []
    eng.at(100, lambda ev: fired.append(100))
    eng.at(101, lambda ev: fired.append(101))
    eng.run()
    assert fired == [100]


def _noisy_run(seed):
    eng = Engine(SimConfig(seed=seed))

    def hop(ev):
        eng.record(ev.payload["n"] % 4, "hop", n=ev.payload["n"], r=eng.rng.randrange(1000))
        if ev.payload["n"] < 200:
            eng.after(eng.rng.randrange(1, 50), hop, EventKind.TIMER, n=ev.payload["n"] + 1)

    eng.at(0, hop, n=0)
    eng.run()
    return eng.trace_csv()


def test_same_seed_gives_byte_identical_trace():
    assert hashlib.sha256(_noisy_run(7).encode()).digest() == \
        hashlib.sha256(_noisy_run(7).encode()).digest()
    assert _noisy_run(7) != _noisy_run(8)


@pytest.mark.parametrize("ms,cycles", [(0, 0), (500, 1_000_000_000), (3, 6_000_000)])
def test_millis_to_cycles(ms, cycles):
    assert cycles_from_millis(ms, SimConfig()) == cycles


def test_millis_roundtrip_and_bad_values():
    cfg = SimConfig()
    assert millis_from_cycles(cycles_from_millis(250, cfg), cfg) == 250
    with pytest.raises(ValueError):
        cycles_from_millis(-1, cfg)
    with pytest.raises(TimeOverflowError):
        cycles_from_millis(10**20, cfg)
    with pytest.raises(ValueError):
        SimConfig(cycles_per_second=0)


@given(st.lists(st.integers(0, 10**6), max_size=60))
def test_dispatch_order_is_time_then_id(times):
    eng = Engine()
    order = []
    ids = [eng.at(t, lambda ev: order.append((ev.at, ev.id))) for t in times]
    eng.run()
    assert order == sorted(zip(times, ids))


@given(st.lists(st.tuples(st.integers(0, 10**9), st.sampled_from(["0", "1", "host"]),
                          st.sampled_from(["a", "b_c"]),
                          st.dictionaries(st.sampled_from(["k", "v", "seq"]),
                                          st.integers(-5, 10**6), max_size=3)),
                max_size=20))
def test_trace_csv_roundtrip(rows):
    recs = [TraceRecord(t, sb, et, tuple((k, str(v)) for k, v in d.items()))
            for t, sb, et, d in rows]
    text = trace_to_csv(recs)
    assert text.splitlines()[0] == "time_cycles,sandbox,event_type,detail"
    assert read_trace_csv(text) == recs
