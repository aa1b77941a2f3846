"""Acceptance criteria, one test per criterion.

Each test prints a single ``PASS``/``FAIL criterion N: ...`` line to the
terminal and then asserts, so ``pytest -v`` shows both the verdict and the
usual test status.
"""
import hashlib
import random
import time
from bisect import bisect_right

import pytest

from mksim.engine import Engine, trace_to_csv
from mksim.errors import CapabilityError
from mksim.memory import (MB, PAGE_SIZE, Access, EptTable, HostMemory, LayoutSizes, MonitorToken,
                          Perm, build_layout, guest_access)
from mksim.metrics import compute_metrics
from mksim.scenarios import BUILTINS, run_builtin
from mksim.scheduling import MainVcpu, PcpuScheduler, PeriodicTask, admit, rms_assign

TABLE1_LOCAL = (707, 12427, 823, 134244605, 68750060)
TABLE1_REMOTE = (707, 1291, 823, 134244605, 68750060)

_runs: dict = {}


def demo(name, seed=0):
    """Run a built-in demo once per session and time it."""
    key = (name, seed)
    if key not in _runs:
        t0 = time.perf_counter()
        run = run_builtin(name, seed=seed)
        _runs[key] = (run, time.perf_counter() - t0)
    return _runs[key]


def trace_sha(records):
    return hashlib.sha256(trace_to_csv(records).encode()).hexdigest()


@pytest.fixture
def verdict(capsys):
    def report(n, ok, text):
        with capsys.disabled():
            print(f"\n{'PASS' if ok else 'FAIL'} criterion {n}: {text}")
        return ok
    return report


def _phases(run, arm):
    m = compute_metrics(run.name, run.records)["arms"][arm]
    (rec,) = m["recoveries"]
    return m, rec, tuple(p["cycles"] for p in rec["phases"])


def test_criterion_1_table1_phases(verdict):
    local, t_local = demo("recovery-local")
    remote, t_remote = demo("recovery-remote")
    _, _, p_local = _phases(local, "local")
    _, rec_remote, p_remote = _phases(remote, "remote")
    ok = (p_local == TABLE1_LOCAL and p_remote == TABLE1_REMOTE
          and rec_remote["target"] != rec_remote["sandbox"]
          and t_local < 5 and t_remote < 5)
    assert verdict(1, ok, f"local={p_local} remote={p_remote} "
                          f"wall={t_local:.2f}s/{t_remote:.2f}s")


def test_criterion_2_downtime_decomposition(verdict):
    ok = True
    parts = []
    for name, arm in (("recovery-local", "local"), ("recovery-remote", "remote")):
        run, _ = demo(name)
        m, rec, phases = _phases(run, arm)
        icmp = m["icmp"]["ping"]
        # one event tick of slack between the last phase and the health check
        ok &= abs(rec["downtime_cycles"] - sum(phases)) <= 1
        ok &= rec["missed_icmp"] <= 1
        ok &= icmp["in_order"] and icmp["replies"] == 50
        parts.append(f"{arm}: downtime={rec['downtime_cycles']} missed={rec['missed_icmp']}")
        if arm == "local":
            online = rec["downtime_cycles"]
            rm, rrec, _ = _phases(run, "reboot")
            reboot_missed = rrec["missed_icmp"]
            reboot_down = rrec["downtime_cycles"]
    ratio = online / reboot_down
    ok &= reboot_missed >= 100 and ratio < 0.01
    parts.append(f"reboot missed={reboot_missed} online/reboot={ratio:.5f}")
    assert verdict(2, ok, "; ".join(parts))


def test_criterion_3_isolation(verdict):
    run, wall = demo("isolation")
    (arm, built), = run.arms
    m = compute_metrics(run.name, run.records)["arms"][arm]
    (rec,) = m["recoveries"]
    (gap,) = [g for g in m["service_gaps"] if g["sandbox"] == 0]
    (report,) = built.recovery.reports
    snaps = report.snapshots
    per = m["messages"]["per_sandbox"]
    others = [s for s in snaps["before"] if s != 0]
    intact = all(
        snaps["before"][0]["monitor"] == snaps[k][0]["monitor"]
        and all(snaps["before"][s]["kernel"] == snaps[k][s]["kernel"] for s in others)
        for k in ("after_blast", "after_recovery"))
    ok = (per["2"]["missed"] == 0 and per["3"]["missed"] == 0 and per["2"]["received"] > 0
          and per["3"]["received"] > 0 and intact and rec["violations"] > 0
          and gap["gap_start_cycles"] == rec["fault_at_cycles"]
          and gap["gap_end_cycles"] == rec["healthy_at_cycles"]
          and gap["activity_inside"] == 0 and wall < 10)
    assert verdict(3, ok, f"missed s2={per['2']['missed']} s3={per['3']['missed']} "
                          f"snapshots_intact={intact} gap={gap['gap_cycles']} "
                          f"recovery={rec['downtime_cycles']} wall={wall:.2f}s")


def _flat_oracle_ops(rng, n_ops):
    t, tok = EptTable.create(0, 64 * MB)
    host = HostMemory(64 * MB)
    shadow = bytearray(64 * MB)
    oracle = {}
    pages = [rng.randrange(0, 1 << 36) << 12 for _ in range(64)]
    frames = [rng.randrange(0, (64 * MB) // PAGE_SIZE) * PAGE_SIZE for _ in range(64)]
    need = {Access.READ: Perm.R, Access.WRITE: Perm.W, Access.EXECUTE: Perm.X}
    agree = 0
    for _ in range(n_ops):
        op = rng.random()
        gpa = rng.choice(pages)
        if op < 0.25:
            hpa, perms = rng.choice(frames), Perm(rng.randrange(1, 8))
            t.map(gpa, hpa, perms, 1, tok)
            oracle[gpa] = (hpa, perms)
            agree += 1
        elif op < 0.3:
            t.unmap(gpa, 1, tok)
            oracle.pop(gpa, None)
            agree += 1
        elif op < 0.6:
            access = rng.choice(list(Access))
            addr = gpa + rng.randrange(PAGE_SIZE)
            got = t.walk(addr, access)
            if gpa in oracle and oracle[gpa][1] & need[access]:
                agree += got == oracle[gpa][0] + (addr - gpa)
            else:
                agree += not isinstance(got, int)
        else:
            access = rng.choice([Access.READ, Access.WRITE])
            off = rng.randrange(PAGE_SIZE - 64)
            addr, n = gpa + off, rng.randrange(1, 64)
            ok = gpa in oracle and bool(oracle[gpa][1] & need[access])
            data = rng.randbytes(n) if access is Access.WRITE else None
            res = guest_access(t, host, addr, access, n, data)
            good = res.ok == ok
            if ok:
                hpa = oracle[gpa][0] + off
                if data is not None:
                    shadow[hpa:hpa + n] = data
                else:
                    good &= res.data == bytes(shadow[hpa:hpa + n])
            agree += good
    mapping_ok = {g: (h, p) for g, h, p in t.mappings()} == oracle
    return agree, mapping_ok


def test_criterion_4_ept_isolation_suite(verdict):
    rng = random.Random(4)
    agree, mapping_ok = _flat_oracle_ops(rng, 10_000)

    t, tok = EptTable.create(1, 64 * MB)
    t.map(0x100000, 0x100000, Perm.RWX, 16, tok)
    before = t.digest()
    forged = [None, MonitorToken(1), MonitorToken(0), object()]
    rejected = 0
    for _ in range(1000):
        bad = rng.choice(forged)
        gpa = rng.randrange(0, 1 << 20) << 12
        try:
            [lambda: t.map(gpa, 0x1000, Perm.RW, 1, bad),
             lambda: t.unmap(gpa, 1, bad),
             lambda: t.set_perms(0x100000, Perm.R, 1, bad)][rng.randrange(3)]()
        except CapabilityError:
            rejected += 1
    rejected_ok = rejected == 1000 and t.digest() == before

    sizes = LayoutSizes(host=256 * MB)
    layout, tables, _ = build_layout(4, sizes)
    host = HostMemory(sizes.host)
    for sid, region in layout.kernel_host.items():
        host.write(region.start, bytes([sid + 1]) * (64 * PAGE_SIZE))
    snapshot = {k: bytes(v) for k, v in host.frames.items()}
    blasts = exact = 0
    for _ in range(500):
        a = rng.randrange(4)
        # sandbox 0's host range coincides with every kernel's own GPA window,
        # so only sandboxes 1..3 are reachable as a foreign alias
        v = rng.choice([s for s in range(1, 4) if s != a])
        region = layout.kernel_host[v]
        start = region.start + rng.randrange(0, 64 * PAGE_SIZE)
        length = rng.randrange(1, 4 * PAGE_SIZE)
        pages = len(range(start & ~(PAGE_SIZE - 1), start + length, PAGE_SIZE))
        res = guest_access(tables[a], host, start, Access.WRITE, data=b"\xcc" * length)
        blasts += 1
        exact += len(res.violations) == pages and not res.ok
    own_window = layout.kernel_host[0].start == layout.kernel_gpa.start
    changed = sum(host.frames.get(k) != v for k, v in snapshot.items()) + \
        len(set(host.frames) - set(snapshot))
    ok = (agree == 10_000 and mapping_ok and rejected_ok and exact == blasts and changed == 0
          and own_window)
    assert verdict(4, ok, f"oracle agree={agree}/10000 mutations rejected={rejected}/1000 "
                          f"blasts exact={exact}/{blasts} frames changed={changed}")


def test_criterion_5_vm_exit_free_fast_path(verdict):
    fw, _ = demo("forkwait")
    (_, built), = fw.arms
    fw_exits = sum(sb.vm_exit_count for sb in built.m.sandboxes.values())
    (done,) = [r for r in fw.records if r.event_type == "forkwait_done"]
    iters = int(done.get("iterations"))

    irq, _ = demo("interrupts")
    (_, ib), = irq.arms
    n = len(ib.m.sandboxes)
    irq_exits = sum(sb.vm_exit_count for sb in ib.m.sandboxes.values())
    handled = sum(ib.m.net.handled.values())
    discarded = sum(ib.m.net.discarded.values())
    ok = (fw_exits == 0 and iters == 40_000 and irq_exits == 0 and handled == 30_000
          and discarded == 30_000 * (n - 1))
    assert verdict(5, ok, f"forkwait iterations={iters} vm_exits={fw_exits}; interrupts "
                          f"N={n} vm_exits={irq_exits} handled={handled} discarded={discarded}")


def _random_admitted_set(rng):
    while True:
        n = rng.randint(1, 5)
        params = []
        for _ in range(n):
            period = rng.randrange(20, 400)
            params.append((rng.randint(1, max(1, period // n)), period))
        vs = [MainVcpu(i + 1, c, t) for i, (c, t) in enumerate(params)]
        if admit(vs).accepted:
            return params


def _fg_prefix(runs):
    starts = [a for a, _ in runs]
    cum = [0]
    for a, b in runs:
        cum.append(cum[-1] + b - a)

    def used_before(x):
        i = bisect_right(starts, x) - 1
        if i < 0:
            return 0
        a, b = runs[i]
        return cum[i] + min(max(x - a, 0), b - a)
    return used_before


def _schedule_one(seed):
    rng = random.Random(seed)
    params = _random_admitted_set(rng)
    eng = Engine()
    s = PcpuScheduler(eng, 0)
    vs = [s.add(MainVcpu(i + 1, c, t)) for i, (c, t) in enumerate(params)]
    rms_assign(vs)
    s.resume()
    horizon = 100 * max(t for _, t in params)
    tasks = [PeriodicTask(s, v, v.period, rng.randint(1, v.c_max), offset=rng.randrange(v.period),
                          until=horizon) for v in vs]
    conserved = True
    while eng.step():
        for v in vs:
            conserved &= v.budget + v.pending_amount() == v.c_max
    s._charge(eng.now)
    runs = {v.id: [] for v in vs}
    for r in eng.trace:
        if r.event_type == "vcpu_preempt" and r.get("band") == "fg":
            runs[int(r.get("vcpu"))].append((int(r.get("ran_from")), int(r.get("ran_to"))))
    stamps = sorted({r.at for r in eng.trace})
    window_ok = True
    for v in vs:
        used = _fg_prefix(sorted(runs[v.id]))
        for t in stamps:
            if used(t + v.period) - used(t) > v.c_max:
                window_ok = False
                break
    misses = sum(task.misses for task in tasks)
    return conserved, window_ok, misses


def test_criterion_6_scheduling_invariants(verdict):
    conserved = windows = 0
    misses = 0
    for seed in range(100):
        c, w, m = _schedule_one(seed)
        conserved += c
        windows += w
        misses += m
    ok = conserved == 100 and windows == 100 and misses == 0
    assert verdict(6, ok, f"sets=100 conservation={conserved}/100 sliding_window={windows}/100 "
                          f"deadline_misses={misses}")


def _r_squared(xs, ys):
    n = len(xs)
    mx, my = sum(xs) / n, sum(ys) / n
    sxx = sum((x - mx) ** 2 for x in xs)
    sxy = sum((x - mx) * (y - my) for x, y in zip(xs, ys))
    slope = sxy / sxx
    icpt = my - slope * mx
    ss_res = sum((y - (icpt + slope * x)) ** 2 for x, y in zip(xs, ys))
    ss_tot = sum((y - my) ** 2 for y in ys)
    return 1 - ss_res / ss_tot


def test_criterion_7_msgbench_orderings(verdict):
    run, wall = demo("msgbench")
    arms = compute_metrics(run.name, run.records)["arms"]
    sizes = [2 ** k for k in range(6, 21)]
    hi = [arms["hi"]["throughput"][str(s)]["mean_cycles"] for s in sizes]
    low = [arms["low"]["throughput"][str(s)]["mean_cycles"] for s in sizes]
    ordered = sum(h <= lo for h, lo in zip(hi, low))
    r2_hi, r2_low = _r_squared(sizes, hi), _r_squared(sizes, low)
    ok = ordered == len(sizes) and r2_hi >= 0.99 and r2_low >= 0.99 and wall < 60
    assert verdict(7, ok, f"hi<=low at {ordered}/{len(sizes)} sizes R2 hi={r2_hi:.5f} "
                          f"low={r2_low:.5f} wall={wall:.2f}s")


def test_criterion_8_determinism(verdict):
    same = 0
    for name in BUILTINS:
        first, _ = demo(name)
        again = run_builtin(name)
        same += trace_sha(first.records) == trace_sha(again.records)
        _runs.pop((name, 0))
    ok = same == len(BUILTINS)
    assert verdict(8, ok, f"identical trace.csv SHA-256 for {same}/{len(BUILTINS)} demos")
