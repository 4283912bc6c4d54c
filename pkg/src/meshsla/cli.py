"""Command-line entry point: ``meshsla <command> ...``.

Exit codes: 0 success, 1 run-time failure, 2 infeasible SLA, 3 schema or
configuration error, 4 I/O error.
"""
from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import sys
from typing import List, Optional, Sequence

import numpy as np

from .errors import ConfigError, Infeasible, InfeasibleBudget, MeshSlaError, SchemaError
from .experiments import (
    CONTROLLERS,
    Planner,
    estimation_accuracy,
    explore,
    run_closed_loop,
)
from .exploration import load_store, save_store
from .optimizer import AllocationPlan, brute_force_allocation
from .profiler import profile_backpressure_threshold
from .scenario import Scenario, load_scenario
from .simulator import SimConfig, ThrottleEvent, run_simulation
from .workload import make_stream

EXIT_OK, EXIT_FAIL, EXIT_INFEASIBLE, EXIT_SCHEMA, EXIT_IO = 0, 1, 2, 3, 4
PATTERNS = ("constant", "diurnal", "burst", "skewed")

log = logging.getLogger("meshsla")


def _write_json(path: str, obj) -> None:
    with open(path, "w") as fh:
        json.dump(obj, fh, indent=2, default=_jsonable)
        fh.write("\n")


def _jsonable(x):
    if isinstance(x, np.generic):
        return x.item()
    if isinstance(x, np.ndarray):
        return x.tolist()
    raise TypeError(f"cannot serialise {type(x).__name__}")


def _outdir(path: str) -> str:
    os.makedirs(path, exist_ok=True)
    return path


def _throttle(spec: str) -> ThrottleEvent:
    try:
        svc, factor, start, end = spec.split(":")
        return ThrottleEvent(svc, float(start), float(end), float(factor))
    except ValueError:
        raise ConfigError(f"bad --throttle {spec!r}; expected SVC:FACTOR:START:END") from None


def _replicas(items: Sequence[str], scenario: Scenario) -> dict:
    alloc = {s: 1 for s in scenario.topology.nodes}
    alloc.update({s: int(n) for s, n in scenario.raw.get("simulate", {}).get("replicas", {}).items()})
    for item in items:
        svc, _, n = item.partition("=")
        if svc not in alloc or not n.isdigit():
            raise ConfigError(f"bad --replicas {item!r}")
        alloc[svc] = int(n)
    return alloc


# -- commands -------------------------------------------------------------------

def cmd_simulate(args) -> int:
    sc = load_scenario(args.scenario)
    sim_cfg = sc.raw.get("simulate", {})
    duration = float(args.duration if args.duration is not None else sim_cfg.get("duration_s", 600))
    seed = sc.seed if args.seed is None else args.seed
    throttles = sc.throttles() if args.throttle is None else [_throttle(t) for t in args.throttle]
    stream = make_stream(sc.pattern(args.pattern), duration, seed)
    cfg = SimConfig(sc.topology, _replicas(args.replicas, sc), duration, seed=seed,
                    telemetry_bucket_s=sc.bucket_s)
    tel = run_simulation(cfg, stream, throttles)
    out = _outdir(args.out)
    tel.to_csv(os.path.join(out, "telemetry.csv"))
    heat = tel.heatmap(99.0)
    with open(os.path.join(out, "heatmap.csv"), "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["bucket"] + list(tel.services))
        for b, row in enumerate(heat):
            w.writerow([b] + [f"{v:.4f}" for v in row])
    _write_json(os.path.join(out, "simulation.json"), tel.to_json())
    print(f"{len(stream)} requests over {duration:g}s; {tel.completed_buckets} buckets -> {out}")
    return EXIT_OK


def cmd_profile(args) -> int:
    sc = load_scenario(args.scenario)
    if args.service not in sc.topology.nodes:
        raise ConfigError(f"unknown service {args.service!r}")
    node = sc.topology.nodes[args.service]
    if sc.topology.is_mq_only(args.service):
        res = profile_backpressure_threshold(node, None, mq_only=True)
    else:
        res = profile_backpressure_threshold(node, sc.bp_config(args.service))
    out = _outdir(args.out)
    res.to_json(os.path.join(out, f"bp_{args.service}.json"))
    res.sweep_csv(os.path.join(out, f"bp_{args.service}_sweep.csv"))
    where = "message-queue cap" if res.mq_only else f"converged at limit index {res.converged_at}"
    print(f"{args.service}: threshold {res.threshold_utilization:.3f} ({where})")
    return EXIT_OK


def cmd_explore(args) -> int:
    sc = load_scenario(args.scenario)
    out = _outdir(args.out)
    path = os.path.join(out, "profiles.json")
    store = load_store(path) if os.path.exists(path) else None
    services = [args.service] if args.service else None
    store, summaries = explore(sc, services, store)
    save_store(path, store)
    rows = [s.to_dict() for s in summaries]
    _write_json(os.path.join(out, "exploration_summary.json"), {
        "services": rows,
        "total_samples": sum(r["samples"] for r in rows),
        "total_wall_s": sum(r["wall_s"] for r in rows),
    })
    for r in rows:
        print(f"{r['service']:>20}  samples {r['samples']:4d}  rows {r['rows']:2d}  "
              f"{r['termination']:<14} threshold {r['backpressure_threshold']:.3f}  {r['wall_s']:.1f}s")
    print(f"total samples {sum(r['samples'] for r in rows)} -> {path}")
    return EXIT_OK


def cmd_optimize(args) -> int:
    sc = load_scenario(args.scenario)
    store = load_store(args.profiles)
    planner = Planner(sc, store, calibrate=not args.no_calibrate, method=args.calibration)
    plan = planner.plan()
    doc = plan.to_dict()
    doc["overestimation"] = planner.overestimation
    doc["scenario"] = sc.name
    doc["profile_store"] = os.path.abspath(args.profiles)
    if args.oracle:
        ref = brute_force_allocation(planner.inputs())
        doc["oracle_cost"] = ref.total_cost
        if abs(ref.total_cost - plan.total_cost) > 1e-9:
            print(f"oracle mismatch: solver {plan.total_cost} vs brute force {ref.total_cost}", file=sys.stderr)
            return EXIT_FAIL
        print(f"oracle agrees: cost {ref.total_cost:g}")
    _write_json(args.out, doc)
    for s, i in plan.choices.items():
        print(f"{s:>20}  row {i}  lpr {plan.lpr[s]}")
    print(f"total cost {plan.total_cost:g} cores -> {args.out}")
    return EXIT_OK


def _load_plan(path: str, sc: Scenario):
    with open(path) as fh:
        doc = json.load(fh)
    if doc.get("scenario", sc.name) != sc.name:
        raise ConfigError(f"plan was made for scenario {doc['scenario']!r}, not {sc.name!r}")
    plan = AllocationPlan.from_dict(doc)
    missing = set(plan.choices) - set(sc.topology.nodes)
    if missing:
        raise ConfigError(f"plan names services missing from the scenario: {sorted(missing)}")
    return plan, doc


def cmd_run(args) -> int:
    sc = load_scenario(args.scenario)
    plan, doc = _load_plan(args.plan, sc)
    profiles = args.profiles or doc.get("profile_store")
    if not profiles:
        raise ConfigError("no profile store: pass --profiles")
    planner = Planner(sc, load_store(profiles))
    res = run_closed_loop(sc, planner, plan, args.pattern, args.controller,
                          duration_s=args.duration, seed=args.seed)
    out = _outdir(args.out)
    summary = res.summary()
    summary["scenario"] = sc.name
    _write_json(os.path.join(out, "summary.json"), summary)
    with open(os.path.join(out, "actions.jsonl"), "w") as fh:
        for a in res.actions:
            fh.write(json.dumps(a.to_dict()) + "\n")
    with open(os.path.join(out, "timeseries.csv"), "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["bucket", "service", "replicas", "load_rps"])
        for b in range(res.replicas.shape[0]):
            for i, s in enumerate(res.services):
                w.writerow([b, s, int(res.replicas[b, i]), f"{res.loads[b, i]:.3f}"])
    print(f"{args.controller} on {args.pattern}: mean CPU {res.mean_cpu:.2f} cores")
    for c, v in res.violation_rate.items():
        print(f"{c:>20}  violation rate {100 * v:5.1f}%")
    return EXIT_OK


def cmd_accuracy(args) -> int:
    sc = load_scenario(args.scenario)
    planner = Planner(sc, load_store(args.profiles))
    res = estimation_accuracy(sc, planner, snapshots=args.snapshots, snapshot_s=args.snapshot_s,
                              seed=sc.seed if args.seed is None else args.seed)
    out = _outdir(args.out)
    _write_json(os.path.join(out, "accuracy.json"), {
        "scenario": sc.name,
        "mean_ratio": res.mean_ratio(),
        "estimated": res.estimated,
        "measured": res.measured,
        "allocations": res.allocations,
    })
    for c, r in res.mean_ratio().items():
        print(f"{c:>20}  mean estimated/measured {r:.3f}")
    return EXIT_OK


def _collect(root: str):
    runs, acc = [], []
    for dirpath, _, files in sorted(os.walk(root)):
        for name, bucket in (("summary.json", runs), ("accuracy.json", acc)):
            if name in files:
                with open(os.path.join(dirpath, name)) as fh:
                    d = json.load(fh)
                d["_dir"] = os.path.relpath(dirpath, root)
                bucket.append(d)
    return runs, acc


def report_tables(root: str) -> dict:
    """Figure-ready tables aggregated from every run and accuracy output under ``root``."""
    if not os.path.isdir(root):
        raise FileNotFoundError(root)
    runs, acc = _collect(root)
    if not runs and not acc:
        raise FileNotFoundError(f"no run or accuracy outputs under {root}")
    comparison = []
    for r in runs:
        row = {"run": r["_dir"], "scenario": r.get("scenario", ""), "pattern": r["pattern"],
               "controller": r["controller"], "mean_cpu": r["mean_cpu"],
               "max_violation_rate": r["max_violation_rate"]}
        row.update({f"violation:{c}": v for c, v in r["violation_rate"].items()})
        comparison.append(row)
    series = []
    for a in acc:
        for c in a["estimated"]:
            for k, (e, m) in enumerate(zip(a["estimated"][c], a["measured"][c])):
                series.append({"run": a["_dir"], "class": c, "snapshot": k,
                               "estimated_ms": e, "measured_ms": m})
    return {"comparison": comparison, "accuracy": series}


def cmd_report(args) -> int:
    tables = report_tables(args.inp)
    if args.format == "json":
        json.dump(tables, sys.stdout, indent=2)
        sys.stdout.write("\n")
        return EXIT_OK
    w = None
    for name, rows in tables.items():
        if not rows:
            continue
        keys = list(dict.fromkeys(k for r in rows for k in r))
        print(f"# {name}")
        w = csv.DictWriter(sys.stdout, fieldnames=keys, lineterminator="\n")
        w.writeheader()
        w.writerows(rows)
    return EXIT_OK


# -- parser ---------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="meshsla", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("simulate", help="run the simulator and write telemetry and heatmap CSVs")
    s.add_argument("--scenario", required=True)
    s.add_argument("--seed", type=int)
    s.add_argument("--duration", type=float)
    s.add_argument("--pattern", choices=PATTERNS, default="constant")
    s.add_argument("--throttle", action="append", metavar="SVC:FACTOR:START:END")
    s.add_argument("--replicas", action="append", default=[], metavar="SVC=N")
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_simulate)

    s = sub.add_parser("profile", help="find one service's backpressure-free utilization")
    s.add_argument("--scenario", required=True)
    s.add_argument("--service", required=True)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_profile)

    s = sub.add_parser("explore", help="explore load-per-replica rows into a profile store")
    s.add_argument("--scenario", required=True)
    s.add_argument("--service")
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_explore)

    s = sub.add_parser("optimize", help="solve for minimum-cost scaling thresholds")
    s.add_argument("--scenario", required=True)
    s.add_argument("--profiles", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--oracle", action="store_true", help="cross-check against brute force")
    s.add_argument("--no-calibrate", action="store_true")
    s.add_argument("--calibration", choices=("mean", "percentile"), default="mean")
    s.set_defaults(func=cmd_optimize)

    s = sub.add_parser("run", help="closed-loop run under a load pattern")
    s.add_argument("--scenario", required=True)
    s.add_argument("--plan", required=True)
    s.add_argument("--profiles")
    s.add_argument("--pattern", choices=PATTERNS, default="constant")
    s.add_argument("--controller", choices=CONTROLLERS, default="ursa")
    s.add_argument("--duration", type=float)
    s.add_argument("--seed", type=int)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_run)

    s = sub.add_parser("accuracy", help="estimated vs measured tail latency over random allocations")
    s.add_argument("--scenario", required=True)
    s.add_argument("--profiles", required=True)
    s.add_argument("--snapshots", type=int, default=30)
    s.add_argument("--snapshot-s", type=float, default=300.0)
    s.add_argument("--seed", type=int)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_accuracy)

    s = sub.add_parser("report", help="aggregate run outputs into comparison tables")
    s.add_argument("--in", dest="inp", required=True)
    s.add_argument("--format", choices=("csv", "json"), default="csv")
    s.set_defaults(func=cmd_report)
    return p


def main(argv: Optional[List[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except (Infeasible, InfeasibleBudget) as e:
        cid = getattr(e, "class_id", None)
        print(f"infeasible: {e}" + (f" (blocking class {cid})" if cid else ""), file=sys.stderr)
        return EXIT_INFEASIBLE
    except (SchemaError, ConfigError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_SCHEMA
    except OSError as e:
        print(f"io error: {e}", file=sys.stderr)
        return EXIT_IO
    except MeshSlaError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_FAIL


if __name__ == "__main__":
    sys.exit(main())
