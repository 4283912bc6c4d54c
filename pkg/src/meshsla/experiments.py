"""End-to-end pipelines: profiling, exploration, planning, closed-loop runs."""
from __future__ import annotations

import math
import time
from dataclasses import dataclass, field
from typing import Dict, List, Mapping, Optional, Sequence, Tuple

import numpy as np

from .controller import (
    AUTO_A,
    AUTO_B,
    RECALCULATE,
    Action,
    AnomalyReport,
    BucketObservation,
    ControllerState,
    autoscaler_decision,
    control_loop_step,
)
from .errors import ConfigError, InfeasibleBudget
from .exploration import (
    assemble_model_inputs,
    calibration_history,
    empty_store,
    explore_service,
    store_profiles,
    store_snapshots,
    update_store,
)
from .model import LoadVector, LprProfile, QuantileTable, Topology, replica_count
from .optimizer import AllocationPlan, OptimizerInputs, ServiceInputs, calibrate_overestimation, solve_allocation, tightest_upper_bound
from .profiler import MQ_THRESHOLD, BpProfileResult, profile_backpressure_threshold
from .scenario import Scenario
from .simulator import SimConfig, Simulation
from .stats import empirical_quantile
from .workload import ArrivalStream, LoadPattern, make_stream

URSA = "ursa"
CONTROLLERS = (URSA, AUTO_A, AUTO_B)


def service_loads(topology: Topology, class_rates: Mapping[str, float]) -> Dict[str, LoadVector]:
    """Per-service, per-class visit rates implied by class arrival rates."""
    out: Dict[str, LoadVector] = {s: {} for s in topology.nodes}
    for cid, rate in class_rates.items():
        for svc in topology.classes[cid].path:
            out[svc][cid] = out[svc].get(cid, 0.0) + rate
    return out


def class_rates(pattern: LoadPattern, t: float = 0.0, duration_s: float = 1.0) -> Dict[str, float]:
    total = float(pattern.rate_at(np.array([t]), duration_s)[0])
    w = pattern.weights_at(np.array([t]))[0]
    return {c: total * wi / w.sum() for c, wi in zip(pattern.mix, w)}


# -- backpressure thresholds ------------------------------------------------

def backpressure_threshold(scenario: Scenario, service: str) -> Tuple[float, Optional[BpProfileResult]]:
    """Fixed threshold from the scenario, 0.95 for MQ-only services, else a profiler run."""
    entry = scenario.backpressure_entry(service)
    if "threshold" in entry:
        return float(entry["threshold"]), None
    if scenario.topology.is_mq_only(service):
        return MQ_THRESHOLD, None
    res = profile_backpressure_threshold(scenario.topology.nodes[service], scenario.bp_config(service))
    return res.threshold_utilization, res


# -- exploration ---------------------------------------------------------------

@dataclass
class ExplorationSummary:
    service: str
    samples: int
    buckets_run: int
    rows: int
    termination: str
    backpressure_threshold: float
    wall_s: float

    def to_dict(self) -> dict:
        return dict(self.__dict__)


def explore(scenario: Scenario, services: Optional[Sequence[str]] = None,
            store: Optional[dict] = None) -> Tuple[dict, List[ExplorationSummary]]:
    """Explore ``services`` (default: all) and update the profile store in place."""
    store = store if store is not None else empty_store(scenario.grid)
    if tuple(store.get("grid", ())) != tuple(scenario.grid):
        raise ConfigError("profile store grid differs from the scenario grid")
    todo = list(services) if services else list(scenario.topology.nodes)
    pinned = scenario.initial_replicas()
    pattern = scenario.pattern("constant")
    summaries = []
    for svc in todo:
        if svc not in scenario.topology.nodes:
            raise ConfigError(f"unknown service {svc!r}")
        t0 = time.perf_counter()
        thr, _ = backpressure_threshold(scenario, svc)
        cfg = scenario.exploration_config(svc, thr)
        rec = explore_service(svc, scenario.topology, pattern, cfg, scenario.grid, pinned=pinned)
        update_store(store, rec)
        summaries.append(ExplorationSummary(
            svc, rec.profile.samples_consumed, rec.buckets_run, len(rec.profile.rows),
            rec.profile.termination, thr, time.perf_counter() - t0))
    return store, summaries


# -- planning ------------------------------------------------------------------

class Planner:
    """Turns a profile store into allocation plans, optionally re-costed for a load."""

    def __init__(self, scenario: Scenario, store: Mapping, calibrate: bool = True,
                 method: str = "mean"):
        self.scenario = scenario
        self.topology = scenario.topology
        self.grid = scenario.grid
        self.profiles: Dict[str, LprProfile] = store_profiles(store)
        self.snapshots = store_snapshots(store)
        self.overestimation: Dict[str, float] = {}
        base = assemble_model_inputs(self.profiles, self.grid, self.topology)
        if calibrate and self.snapshots:
            hist = calibration_history(self.snapshots, list(base.services))
            self.overestimation = calibrate_overestimation(hist, base, method=method)
        self.solves = 0

    def inputs(self, load: Optional[Mapping[str, LoadVector]] = None) -> OptimizerInputs:
        return assemble_model_inputs(self.profiles, self.grid, self.topology,
                                     overestimation=self.overestimation, load=load)

    def plan(self, load: Optional[Mapping[str, LoadVector]] = None) -> AllocationPlan:
        self.solves += 1
        return solve_allocation(self.inputs(load))

    def threshold_samples(self, plan: AllocationPlan) -> Dict[str, Dict[str, List[float]]]:
        return {s: dict(self.profiles[s].rows[i].load_samples) for s, i in plan.choices.items()}

    def estimate(self, delta: Mapping[str, int], class_id: str) -> float:
        """Estimated SLA-percentile latency: tightest bound divided by E(alpha)."""
        b = tightest_upper_bound(delta, self.inputs(), class_id).bound_ms
        return b / self.overestimation.get(class_id, 1.0)

    def estimate_measured(self, tables: Mapping[str, Mapping[str, QuantileTable]], class_id: str) -> float:
        """Same estimate, built from per-service tables measured in one window.

        ``tables`` maps service -> class -> table of that service's own latency.
        """
        base = self.inputs()
        services = {}
        for svc, _ in base.classes[class_id].chain:
            t = tables[svc][class_id]
            services[svc] = ServiceInputs(svc, {class_id: np.asarray([t.values], dtype=float)},
                                          np.array([1.0]), [{}])
        one = OptimizerInputs(base.grid, services, {class_id: base.classes[class_id]}, base.budget_scale)
        b = tightest_upper_bound({s: 0 for s in services}, one, class_id).bound_ms
        return b / self.overestimation.get(class_id, 1.0)


def allocation_for(plan_lpr: Mapping[str, LoadVector], loads: Mapping[str, LoadVector],
                   services: Sequence[str], min_replicas: int = 1) -> Dict[str, int]:
    out = {}
    for s in services:
        if s in plan_lpr:
            load = {c: v for c, v in loads.get(s, {}).items() if v > 0}
            out[s] = replica_count(plan_lpr[s], load, min_replicas)
        else:
            out[s] = min_replicas
    return out


# -- estimation accuracy ---------------------------------------------------

@dataclass
class AccuracyResult:
    ratios: Dict[str, List[float]]
    estimated: Dict[str, List[float]]
    measured: Dict[str, List[float]]
    allocations: List[Dict[str, int]]

    def mean_ratio(self) -> Dict[str, float]:
        return {c: float(np.mean(v)) for c, v in self.ratios.items() if v}


def estimation_accuracy(scenario: Scenario, planner: Planner, snapshots: int = 30,
                        snapshot_s: float = 300.0, seed: int = 0) -> AccuracyResult:
    """Compare estimated and measured SLA-percentile latency over random row choices.

    Each snapshot's estimate comes from the per-service latency tables measured
    in that snapshot, divided by the calibrated E(alpha).
    """
    rng = np.random.default_rng(seed)
    pattern = scenario.pattern("constant")
    loads = service_loads(scenario.topology, class_rates(pattern))
    inputs = planner.inputs()
    names = list(inputs.services)
    classes = list(inputs.classes)
    res = AccuracyResult({c: [] for c in classes}, {c: [] for c in classes}, {c: [] for c in classes}, [])
    bucket = scenario.bucket_s
    warm = bucket
    for k in range(snapshots):
        delta = {s: int(rng.integers(inputs.services[s].m)) for s in names}
        lpr = {s: inputs.services[s].Y[i] for s, i in delta.items()}
        alloc = allocation_for(lpr, loads, list(scenario.topology.nodes))
        duration = warm + snapshot_s
        stream = make_stream(pattern, duration, seed * 1000 + k)
        tel = Simulation(SimConfig(scenario.topology, alloc, duration, seed=seed * 1000 + k,
                                   telemetry_bucket_s=bucket), stream).run()
        b0 = int(round(warm / bucket))
        res.allocations.append(alloc)
        for c in classes:
            x = tel.e2e_samples(c, b0, tel.completed_buckets)
            if not x.size:
                continue
            m = empirical_quantile(x, scenario.topology.classes[c].sla.percentile)
            tables = {svc: {c: QuantileTable.from_samples(tel.service_samples(svc, c, b0, tel.completed_buckets),
                                                          planner.grid)}
                      for svc in scenario.topology.classes[c].path}
            e = planner.estimate_measured(tables, c)
            res.measured[c].append(m)
            res.estimated[c].append(e)
            res.ratios[c].append(e / m)
    return res


# -- closed loop ---------------------------------------------------------------

@dataclass
class RunResult:
    controller: str
    pattern: str
    violation_rate: Dict[str, float]
    mean_cpu: float
    actions: List[Action]
    reports: List[AnomalyReport]
    replicas: np.ndarray  # (buckets, services)
    loads: np.ndarray  # (buckets, services) total rps
    services: List[str]
    warmup_buckets: int
    optimizer_calls: int = 0
    violated: Dict[str, List[bool]] = field(default_factory=dict)
    wall_s: float = 0.0

    def summary(self) -> dict:
        return {
            "controller": self.controller,
            "pattern": self.pattern,
            "violation_rate": self.violation_rate,
            "max_violation_rate": max(self.violation_rate.values()) if self.violation_rate else 0.0,
            "mean_cpu": self.mean_cpu,
            "actions": len(self.actions),
            "anomalies": [r.to_dict() for r in self.reports],
            "optimizer_calls": self.optimizer_calls,
            "wall_s": self.wall_s,
        }


def _violations(tel, topology: Topology, b: int) -> Dict[str, bool]:
    out = {}
    for cid, c in topology.classes.items():
        x = tel.e2e_samples(cid, b, b + 1)
        if x.size:
            out[cid] = empirical_quantile(x, c.sla.percentile) > c.sla.latency_ms
    return out


def run_closed_loop(scenario: Scenario, planner: Planner, plan: AllocationPlan, pattern_kind: str,
                    controller: str = URSA, duration_s: Optional[float] = None,
                    warmup_buckets: Optional[int] = None, seed: Optional[int] = None,
                    resolve_on_recalculate: bool = True) -> RunResult:
    """Deploy ``plan`` under a load pattern and let ``controller`` manage replicas."""
    if controller not in CONTROLLERS:
        raise ConfigError(f"unknown controller {controller!r}")
    topo = scenario.topology
    for s in plan.choices:
        if s not in topo.nodes:
            raise ConfigError(f"plan names service {s!r} missing from the scenario")
    settings = scenario.run_settings()
    duration_s = float(duration_s if duration_s is not None else settings.get("duration_s", 3600))
    warmup = int(warmup_buckets if warmup_buckets is not None else settings.get("warmup_buckets", 2))
    seed = scenario.seed if seed is None else seed
    pattern = scenario.pattern(pattern_kind)
    bucket = scenario.bucket_s
    services = list(topo.nodes)
    classes = list(topo.classes)
    stream = make_stream(pattern, duration_s, seed)
    loads0 = service_loads(topo, class_rates(pattern, 0.0, duration_s))
    ccfg = scenario.controller_config()
    alloc = allocation_for(plan.lpr, loads0, services, ccfg.min_replicas)
    chains = {c: list(dict.fromkeys(topo.classes[c].path)) for c in classes}
    state = ControllerState(services, classes, plan.lpr, planner.threshold_samples(plan), alloc, ccfg, chains)
    auto = scenario.autoscaler_thresholds(controller) if controller != URSA else {}
    actions: List[Action] = []
    reports: List[AnomalyReport] = []
    t_start = time.perf_counter()

    def hook(sim: Simulation, b: int) -> bool:
        tel = sim.telemetry
        if controller == URSA:
            per = int(round(bucket / tel.load_sample_s))
            counts = tel.load_counts[b * per:(b + 1) * per]
            obs = BucketObservation(b, np.transpose(counts, (1, 2, 0)).astype(float) / tel.load_sample_s,
                                    _violations(tel, topo, b))
            acts, reps = control_loop_step(state, obs)
            for a in acts:
                sim.apply_allocation(a.service, a.to_replicas)
            actions.extend(acts)
            reports.extend(reps)
            if resolve_on_recalculate and any(r.action == RECALCULATE for r in reps):
                w = max(1, ccfg.deviation_window_buckets)
                lo = max(0, b + 1 - w)
                cur = {s: tel.load(s, lo, b + 1) for s in services}
                new = planner.plan(cur)
                state.install_plan(new.lpr, planner.threshold_samples(new))
                target = allocation_for(new.lpr, cur, services, ccfg.min_replicas)
                redo = []
                for s in services:
                    if target[s] != sim.replicas(s):
                        redo.append(Action(b, s, sim.replicas(s), target[s], "recalculate"))
                        sim.apply_allocation(s, target[s])
                state.apply(redo)
                actions.extend(redo)
        else:
            for s in services:
                cur = sim.replicas(s)
                d = autoscaler_decision(controller, [tel.utilization(s, b, b + 1)],
                                        auto.get("upper"), auto.get("lower"))
                to = max(ccfg.min_replicas, cur + d)
                if to != cur:
                    sim.apply_allocation(s, to)
                    actions.append(Action(b, s, cur, to, controller))
        return False

    sim = Simulation(SimConfig(topo, alloc, duration_s, seed=seed, telemetry_bucket_s=bucket), stream,
                     controller_hook=hook)
    tel = sim.run()
    nb = tel.completed_buckets
    violated = {c: [] for c in classes}
    for b in range(warmup, nb):
        for c, v in _violations(tel, topo, b).items():
            violated[c].append(v)
    rate = {c: float(np.mean(v)) if v else 0.0 for c, v in violated.items()}
    cores = tel.alloc[warmup:nb].sum() / ((nb - warmup) * bucket)
    loads = tel.visit_arrivals.sum(axis=2) / bucket
    return RunResult(controller, pattern_kind, rate, float(cores), actions, reports, tel.replicas.copy(),
                     loads, services, warmup, state.optimizer_calls, violated, time.perf_counter() - t_start)
