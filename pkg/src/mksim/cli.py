"""Command line entry point: ``mksim run|demo|validate``."""

from __future__ import annotations

import argparse
import sys
from dataclasses import replace

from .errors import AdmissionError, ScenarioError, SimError
from .metrics import emit
from .scenarios import BUILTINS, DemoRun, builtin_arms, load_scenario, run_arms

EXIT_OK, EXIT_RUNTIME, EXIT_INVALID = 0, 1, 2


def _parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="mksim", description=__doc__)
    sub = p.add_subparsers(dest="command", required=True)

    run = sub.add_parser("run", help="run a scenario file")
    run.add_argument("scenario")
    run.add_argument("--seed", type=int, help="override sim.seed")
    run.add_argument("--out", default="out", help="output directory (default: %(default)s)")
    run.add_argument("--horizon", type=int, help="stop at this many cycles")

    demo = sub.add_parser("demo", help="run a built-in experiment")
    demo.add_argument("name", choices=BUILTINS)
    demo.add_argument("--seed", type=int, default=0)
    demo.add_argument("--out", default=None, help="output directory (default: out/<name>)")
    demo.add_argument("--paper-scale", action="store_true",
                      help="use the full trial counts (slow)")
    demo.add_argument("--trials", type=int, help="msgbench trials per size")

    val = sub.add_parser("validate", help="check a scenario file without running it")
    val.add_argument("scenario")
    return p


def _summary(metrics: dict) -> str:
    lines = []
    for arm, a in sorted(metrics["arms"].items()):
        parts = [f"events={a['events']}", f"vm_exits={a['vm_exits']['total']}"]
        for rec in a["recoveries"]:
            parts.append(f"{rec['mode']} downtime={rec['downtime_cycles']} "
                         f"missed_icmp={rec['missed_icmp']}")
        for name, g in a["icmp"].items():
            parts.append(f"{name}: sent={g['sent']} replies={g['replies']} missed={g['missed']}")
        irq = a["interrupts"]
        if irq["handled_total"] or irq["discarded_total"]:
            parts.append(f"irq handled={irq['handled_total']} discarded={irq['discarded_total']}")
        if "forkwait" in a:
            parts.append(f"forkwait iterations={a['forkwait']['iterations']}")
        if a["throughput"]:
            parts.append(f"message sizes={len(a['throughput'])}")
        lines.append(f"[{arm}] " + "; ".join(parts))
    lines.append(f"trace sha256 {metrics['trace_sha256']}")
    return "\n".join(lines)


def _finish(run: DemoRun, out: str, cps: int) -> None:
    metrics = emit(run.name, run.records, out, cps)
    print(_summary(metrics))
    print(f"wrote {out}")


def main(argv=None) -> int:
    args = _parser().parse_args(argv)
    try:
        if args.command == "validate":
            cfg = load_scenario(args.scenario)
            print(f"{args.scenario}: ok ({len(cfg.sandboxes)} sandboxes, {len(cfg.vcpus)} vcpus)")
            return EXIT_OK
        if args.command == "run":
            cfg = load_scenario(args.scenario)
            if args.seed is not None:
                cfg = replace(cfg, sim={**cfg.sim, "seed": args.seed})
            run = run_arms(cfg.name, [("main", cfg)], args.horizon)
            _finish(run, args.out, cfg.sim_config().cycles_per_second)
            return EXIT_OK
        arms = builtin_arms(args.name, args.seed, args.paper_scale, args.trials)
        run = run_arms(args.name, arms)
        _finish(run, args.out or f"out/{args.name}", arms[0][1].sim_config().cycles_per_second)
        return EXIT_OK
    except AdmissionError as e:
        print(f"admission failed: {e}", file=sys.stderr)
        if e.report is not None:
            print(e.report, file=sys.stderr)
        return EXIT_INVALID
    except ScenarioError as e:
        print(f"invalid scenario: {e}", file=sys.stderr)
        return EXIT_INVALID
    except FileNotFoundError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_INVALID
    except (SimError, OSError) as e:
        print(f"runtime error: {e}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
