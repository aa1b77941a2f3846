"""Metrics and figure series computed from a trace, and nothing else.

Everything here takes :class:`TraceRecord` rows whose details may be plain
strings (as read back from ``trace.csv``), so recomputing from the file on
disk gives the same numbers as the live run.
"""

from __future__ import annotations

import bisect
import csv
import hashlib
import io
import json
from collections import defaultdict
from pathlib import Path

from .engine import TraceRecord, read_trace_csv, trace_to_csv

DEFAULT_ARM = "main"


def _int(v, default=None):
    try:
        return int(v)
    except (TypeError, ValueError):
        return default


def split_arms(records) -> dict[str, list[TraceRecord]]:
    arms: dict[str, list[TraceRecord]] = {}
    for r in records:
        arms.setdefault(r.get("arm", DEFAULT_ARM), []).append(r)
    return arms


# -- per-topic extractors --------------------------------------------------

def vm_exits(records) -> dict:
    per = defaultdict(int)
    for r in records:
        if r.event_type == "vm_exit":
            per[r.sandbox] += 1
    return {"per_sandbox": dict(sorted(per.items())), "total": sum(per.values())}


def icmp(records) -> dict:
    gens: dict[str, dict] = {}

    def g(name):
        return gens.setdefault(name, {"sent": 0, "replies": 0, "missed": 0, "late": 0,
                                      "reply_seqs": [], "rtt": [], "handled_by": defaultdict(int)})

    for r in records:
        et = r.event_type
        if et == "icmp_req":
            g(r.get("gen"))["sent"] += 1
        elif et == "icmp_reply":
            d = g(r.get("gen"))
            d["replies"] += 1
            d["reply_seqs"].append(_int(r.get("seq")))
            d["rtt"].append(_int(r.get("rtt"), 0))
            d["handled_by"][r.get("handler")] += 1
        elif et == "icmp_missed":
            g(r.get("gen"))["missed"] += 1
        elif et == "icmp_late":
            g(r.get("gen"))["late"] += 1
    out = {}
    for name, d in sorted(gens.items()):
        seqs = d.pop("reply_seqs")
        rtt = d.pop("rtt")
        d["in_order"] = all(a < b for a, b in zip(seqs, seqs[1:]))
        d["mean_rtt_cycles"] = sum(rtt) / len(rtt) if rtt else None
        d["handled_by"] = dict(sorted(d["handled_by"].items()))
        out[name] = d
    return out


def interrupts(records) -> dict:
    handled, discarded, lost = defaultdict(int), defaultdict(int), defaultdict(int)
    for r in records:
        if r.event_type == "irq_handle":
            handled[r.sandbox] += 1
        elif r.event_type == "irq_discard":
            discarded[r.sandbox] += 1
        elif r.event_type == "irq_lost":
            lost[r.sandbox] += 1
    return {"handled": dict(sorted(handled.items())), "discarded": dict(sorted(discarded.items())),
            "lost": dict(sorted(lost.items())),
            "handled_total": sum(handled.values()), "discarded_total": sum(discarded.values())}


def recoveries(records) -> list[dict]:
    """One entry per fault, rebuilt from fault/phase/health events."""
    out = []
    open_by_origin = {}
    req_time = {}
    answered = []        # (time of request, seq) for requests that got replies
    missed = []          # (request time, seq)
    for r in records:
        et = r.event_type
        if et == "icmp_req":
            req_time[(r.get("gen"), r.get("seq"))] = r.at
        elif et == "icmp_reply":
            answered.append(req_time.get((r.get("gen"), r.get("seq")), r.at))
        elif et == "icmp_missed":
            missed.append(req_time.get((r.get("gen"), r.get("seq")), r.at))
        elif et == "fault_inject":
            rec = {"sandbox": _int(r.sandbox), "mode": r.get("mode"), "fault_at_cycles": r.at,
                   "exit_reason": None, "phases": [], "target": None,
                   "healthy_at_cycles": None, "downtime_cycles": None,
                   "restored_channels": [], "violations": 0}
            open_by_origin[r.sandbox] = rec
            out.append(rec)
        elif et == "ept_violation" and r.sandbox in open_by_origin:
            rec = open_by_origin[r.sandbox]
            if rec["exit_reason"] is None:
                rec["violations"] += 1
        elif et == "vm_exit" and r.sandbox in open_by_origin:
            rec = open_by_origin[r.sandbox]
            if rec["exit_reason"] is None:
                rec["exit_reason"] = r.get("reason")
        elif et == "recovery_phase":
            rec = open_by_origin.get(r.get("origin"))
            if rec is not None:
                rec["phases"].append({"name": r.get("phase"), "cycles": _int(r.get("cycles"))})
        elif et == "channel_restore":
            for rec in open_by_origin.values():
                rec["restored_channels"].append(r.get("chan"))
        elif et == "recovery_done":
            rec = open_by_origin.pop(r.sandbox, None)
            if rec is not None:
                rec["target"] = _int(r.get("target"))
                rec["healthy_at_cycles"] = r.at
                rec["downtime_cycles"] = r.at - rec["fault_at_cycles"]
                rec["mode"] = r.get("mode")
    answered.sort()
    for rec in out:
        rec["phase_total_cycles"] = sum(p["cycles"] for p in rec["phases"])
        t0, t1 = rec["fault_at_cycles"], rec["healthy_at_cycles"]
        # the last request answered before the fault bounds the window
        i = bisect.bisect_left(answered, t0)
        lo = answered[i - 1] if i else -1
        hi = t1 if t1 is not None else float("inf")
        rec["missed_icmp"] = sum(1 for t in missed if lo < t <= hi)
    return out


def service_gaps(records, recs) -> list[dict]:
    """Service activity of each faulty sandbox inside its recovery window."""
    out = []
    for rec in recs:
        sid = str(rec["sandbox"])
        t0, t1 = rec["fault_at_cycles"], rec["healthy_at_cycles"]
        if t1 is None:
            continue
        inside, before, after = 0, None, None
        for r in records:
            active = ((r.event_type == "icmp_reply" and r.get("handler") == sid)
                      or (r.event_type == "msg_recv_done" and r.sandbox == sid))
            if not active:
                continue
            if t0 < r.at < t1:
                inside += 1
            elif r.at <= t0:
                before = r.at
            elif after is None:
                after = r.at
        out.append({"sandbox": rec["sandbox"], "gap_start_cycles": t0, "gap_end_cycles": t1,
                    "gap_cycles": t1 - t0, "activity_inside": inside,
                    "last_activity_before": before, "first_activity_after": after})
    return out


def messages(records) -> dict:
    per = {}
    seqs = defaultdict(list)
    for r in records:
        et = r.event_type
        if et in ("msg_recv_done", "msg_poll_empty", "msg_poll_missed"):
            d = per.setdefault(r.sandbox, {"received": 0, "empty_polls": 0, "missed_polls": 0})
            if et == "msg_recv_done":
                d["received"] += 1
                seqs[r.get("chan")].append(_int(r.get("seq")))
            elif et == "msg_poll_empty":
                d["empty_polls"] += 1
            else:
                d["missed_polls"] += 1
    for d in per.values():
        d["missed"] = d["empty_polls"] + d["missed_polls"]
    ordered = all(all(a < b for a, b in zip(s, s[1:])) for s in seqs.values())
    sent = sum(1 for r in records if r.event_type == "msg_send_start")
    skipped = sum(1 for r in records if r.event_type == "msg_send_skip")
    corrupt = sum(1 for r in records if r.event_type == "msg_corrupt")
    return {"per_sandbox": dict(sorted(per.items())), "seq_strictly_increasing": ordered,
            "sent": sent, "send_skipped": skipped, "corrupt": corrupt}


def throughput(records) -> dict:
    acc = defaultdict(list)
    for r in records:
        if r.event_type == "msg_recv_done":
            c = _int(r.get("cycles"))
            if c is not None:
                acc[_int(r.get("size"))].append(c)
    return {str(size): {"mean_cycles": sum(v) / len(v), "trials": len(v)}
            for size, v in sorted(acc.items())}


def locks(records) -> dict:
    holder, violations, acquires = {}, 0, 0
    for r in records:
        if r.event_type == "lock_acquire":
            acquires += 1
            dev = r.get("dev")
            if holder.get(dev) is not None:
                violations += 1
            holder[dev] = r.sandbox
        elif r.event_type == "lock_release":
            dev = r.get("dev")
            if holder.get(dev) != r.sandbox:
                violations += 1
            holder[dev] = None
    waits = sum(1 for r in records if r.event_type == "lock_wait")
    return {"acquires": acquires, "waits": waits, "mutual_exclusion_violations": violations}


def forkwait(records) -> dict | None:
    for r in records:
        if r.event_type == "forkwait_done":
            return {"iterations": _int(r.get("iterations")), "cycles": _int(r.get("cycles"))}
    return None


def arm_metrics(records) -> dict:
    recs = recoveries(records)
    out = {
        "events": len(records),
        "end_cycles": records[-1].at if records else 0,
        "vm_exits": vm_exits(records),
        "icmp": icmp(records),
        "interrupts": interrupts(records),
        "recoveries": recs,
        "service_gaps": service_gaps(records, recs),
        "messages": messages(records),
        "throughput": throughput(records),
        "locks": locks(records),
        "deadline_misses": sum(1 for r in records if r.event_type == "deadline_miss"),
    }
    fw = forkwait(records)
    if fw is not None:
        out["forkwait"] = fw
    return out


def compute_metrics(name: str, records) -> dict:
    records = list(records)
    return {"scenario": name,
            "arms": {arm: arm_metrics(recs) for arm, recs in split_arms(records).items()}}


# -- figure series ---------------------------------------------------------

def fig6_rows(records, cycles_per_second: int = 2_000_000_000) -> list[tuple]:
    """ICMP request/reply/missed events with running totals, per arm."""
    rows = []
    for arm, recs in split_arms(records).items():
        req = rep = miss = 0
        for r in recs:
            et = r.event_type
            if et not in ("icmp_req", "icmp_reply", "icmp_missed"):
                continue
            if et == "icmp_req":
                req += 1
            elif et == "icmp_reply":
                rep += 1
            else:
                miss += 1
            rows.append((arm, r.at, f"{r.at / cycles_per_second:.6f}", et[5:], r.get("seq"),
                         req, rep, miss))
    return rows


FIG6_HEADER = ("arm", "time_cycles", "time_s", "event", "seq", "cumulative_requests",
               "cumulative_replies", "cumulative_missed")


def fig9_rows(records) -> list[tuple]:
    rows = []
    for arm, recs in split_arms(records).items():
        for size, d in throughput(recs).items():
            rows.append((arm, int(size), f"{d['mean_cycles']:.3f}", d["trials"]))
    return rows


FIG9_HEADER = ("arm", "size_bytes", "mean_cycles", "trials")


def fig10_rows(records, cycles_per_second: int = 2_000_000_000) -> list[tuple]:
    """Per-sandbox cumulative message receptions and ICMP replies over time."""
    rows = []
    for arm, recs in split_arms(records).items():
        counts = defaultdict(int)
        for r in recs:
            if r.event_type == "msg_recv_done":
                sid, kind = r.sandbox, "message"
            elif r.event_type == "icmp_reply":
                sid, kind = r.get("handler"), "icmp_reply"
            elif r.event_type == "msg_poll_missed":
                sid, kind = r.sandbox, "missed_poll"
            else:
                continue
            counts[(sid, kind)] += 1
            rows.append((arm, r.at, f"{r.at / cycles_per_second:.6f}", sid, kind,
                         counts[(sid, kind)]))
    return rows


FIG10_HEADER = ("arm", "time_cycles", "time_s", "sandbox", "event", "cumulative")


def _csv(header, rows) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    w.writerows(rows)
    return buf.getvalue()


def emit(name: str, records, out_dir, cycles_per_second: int = 2_000_000_000) -> dict:
    """Write trace.csv, metrics.json and the figure series into ``out_dir``.

    Metrics are computed from the trace text just written, so they can always
    be recomputed from the file. Returns the metrics dict.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    text = trace_to_csv(records)
    (out / "trace.csv").write_text(text)
    parsed = read_trace_csv(text)
    metrics = compute_metrics(name, parsed)
    metrics["trace_sha256"] = hashlib.sha256(text.encode()).hexdigest()
    (out / "metrics.json").write_text(json.dumps(metrics, indent=2, sort_keys=True) + "\n")
    series = {
        "fig6_series.csv": (FIG6_HEADER, fig6_rows(parsed, cycles_per_second)),
        "fig9_series.csv": (FIG9_HEADER, fig9_rows(parsed)),
        "fig10_series.csv": (FIG10_HEADER, fig10_rows(parsed, cycles_per_second)),
    }
    for fname, (header, rows) in series.items():
        if rows:
            (out / fname).write_text(_csv(header, rows))
    return metrics


def recompute(out_dir) -> dict:
    """Metrics recomputed from ``out_dir/trace.csv`` (for checking emit)."""
    out = Path(out_dir)
    text = (out / "trace.csv").read_text()
    name = json.loads((out / "metrics.json").read_text())["scenario"]
    metrics = compute_metrics(name, read_trace_csv(text))
    metrics["trace_sha256"] = hashlib.sha256(text.encode()).hexdigest()
    return json.loads(json.dumps(metrics, sort_keys=True))
