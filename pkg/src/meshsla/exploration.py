"""Per-service load-per-replica exploration and optimizer input assembly.

A service is explored in one continuous simulation: it starts at
``initial_replicas`` while every other service stays at its pinned
allocation, and after each iteration of ``samples_per_iteration`` buckets
the replica count drops by ``step``.  An iteration whose SLA-violation
frequency reaches ``sla_violation_threshold`` or whose utilization reaches
the backpressure threshold ends the exploration and is not recorded.
"""
from __future__ import annotations

import json
import math
import os
from dataclasses import dataclass, field
from typing import Dict, List, Mapping, Optional, Sequence, Tuple, Union

import numpy as np

from .errors import ConfigError, GridMismatch, MissingProfile, NoFeasibleRow
from .model import (
    LprProfile,
    ProfileRow,
    QuantileTable,
    Topology,
    enumerate_chains,
    resource_cost,
)
from .optimizer import ClassInputs, OptimizerInputs, ServiceInputs
from .simulator import SimConfig, Simulation
from .stats import empirical_quantile
from .workload import ArrivalStream, LoadPattern, make_stream

DEFAULT_GRID = (50.0, 90.0, 95.0, 99.0, 99.5, 99.9)
PROFILE_STORE_VERSION = 1

TERM_SLA = "sla_violation"
TERM_BACKPRESSURE = "backpressure"
TERM_EXHAUSTED = "exhausted"


@dataclass(frozen=True)
class ExplorationConfig:
    initial_replicas: int
    backpressure_threshold: float
    step: int = 1
    samples_per_iteration: int = 10
    sla_violation_threshold: float = 0.10
    profiling_time_s: float = 60.0
    seed: int = 0

    def __post_init__(self):
        if self.initial_replicas < 1:
            raise ConfigError("initial_replicas must be >= 1")
        if self.step < 1:
            raise ConfigError("step must be >= 1")
        if not 0 < self.sla_violation_threshold < 1:
            raise ConfigError("sla_violation_threshold must lie in (0, 1)")
        if not 0 < self.backpressure_threshold <= 1:
            raise ConfigError("backpressure_threshold must lie in (0, 1]")
        if self.samples_per_iteration < 1:
            raise ConfigError("samples_per_iteration must be >= 1")

    @property
    def max_iterations(self) -> int:
        return math.ceil(self.initial_replicas / self.step)


def check_grid(grid: Sequence[float], topology: Optional[Topology] = None) -> Tuple[float, ...]:
    g = tuple(float(p) for p in grid)
    if not g or any(b <= a for a, b in zip(g, g[1:])):
        raise GridMismatch("percentile grid must be strictly ascending")
    if topology is not None:
        for c in topology.classes.values():
            if c.sla.percentile > g[-1]:
                raise GridMismatch(f"grid maximum {g[-1]} below SLA percentile of class {c.id!r}")
    return g


@dataclass
class Snapshot:
    """Measured end-to-end tables for one iteration of one service's exploration."""

    service: str
    row: int
    replicas: int
    measured: Dict[str, QuantileTable]

    def to_dict(self) -> dict:
        return {"service": self.service, "row": self.row, "replicas": self.replicas,
                "measured": {c: t.to_dict() for c, t in self.measured.items()}}

    @classmethod
    def from_dict(cls, d: Mapping) -> "Snapshot":
        return cls(d["service"], int(d["row"]), int(d["replicas"]),
                   {c: QuantileTable.from_dict(t) for c, t in d["measured"].items()})


@dataclass
class ExplorationRecord:
    profile: LprProfile
    snapshots: List[Snapshot]
    iterations: List[dict]
    buckets_run: int


def _stream_for(arrivals: Union[ArrivalStream, LoadPattern], duration: float, seed: int) -> ArrivalStream:
    if isinstance(arrivals, LoadPattern):
        return make_stream(arrivals, duration, seed)
    return arrivals


def explore_service(service: str, topology: Topology, arrivals: Union[ArrivalStream, LoadPattern],
                    config: ExplorationConfig, grid: Sequence[float] = DEFAULT_GRID,
                    pinned: Optional[Mapping[str, int]] = None,
                    sla_classes: Optional[Sequence[str]] = None) -> ExplorationRecord:
    """Explore ``service`` and return its profile plus the measurements taken.

    ``pinned`` fixes the replica counts of every other service (default 1
    each); ``sla_classes`` lists the monitored classes (default: every class
    whose path touches the service).
    """
    if service not in topology.nodes:
        raise MissingProfile(f"unknown service {service!r}")
    grid = check_grid(grid, topology)
    node = topology.nodes[service]
    monitored = list(sla_classes) if sla_classes is not None else topology.classes_at(service)
    at_service = topology.classes_at(service)
    alloc = {s: int((pinned or {}).get(s, 1)) for s in topology.nodes}
    alloc[service] = config.initial_replicas
    spi = config.samples_per_iteration
    bucket_s = config.profiling_time_s
    duration = spi * config.max_iterations * bucket_s
    stream = _stream_for(arrivals, duration, config.seed)

    rows: List[ProfileRow] = []
    snapshots: List[Snapshot] = []
    iterations: List[dict] = []
    state = {"r": config.initial_replicas, "termination": ""}

    def hook(sim: Simulation, b: int) -> bool:
        if (b + 1) % spi:
            return False
        tel = sim.telemetry
        b0, b1 = b + 1 - spi, b + 1
        r = state["r"]
        violating = 0
        for k in range(b0, b1):
            for cid in monitored:
                c = topology.classes[cid]
                x = tel.e2e_samples(cid, k, k + 1)
                if x.size and empirical_quantile(x, c.sla.percentile) > c.sla.latency_ms:
                    violating += 1
                    break
        f_sla = violating / spi
        cpu = tel.utilization(service, b0, b1)
        it = {"replicas": r, "f_sla": f_sla, "utilization": cpu, "buckets": [b0, b1]}
        iterations.append(it)
        if f_sla >= config.sla_violation_threshold:
            state["termination"] = TERM_SLA
        elif cpu >= config.backpressure_threshold:
            state["termination"] = TERM_BACKPRESSURE
        if state["termination"]:
            it["recorded"] = False
            return True
        load = {c: v for c, v in tel.load(service, b0, b1).items() if c in at_service}
        lpr = {c: v / r for c, v in load.items()}
        tables = {}
        samples = {}
        for cid in load:
            x = tel.service_samples(service, cid, b0, b1)
            tables[cid] = QuantileTable.from_samples(x, grid)
            samples[cid] = (tel.load_samples(service, cid, b0, b1) / r).tolist()
        rows.append(ProfileRow(
            lpr=lpr, quantiles=tables, cpu_cost=resource_cost(lpr, load, node.cpu_per_replica),
            utilization=cpu, replicas=r, load_samples=samples))
        measured = {}
        for cid in topology.classes:
            x = tel.e2e_samples(cid, b0, b1)
            if x.size:
                measured[cid] = QuantileTable.from_samples(x, grid)
        snapshots.append(Snapshot(service, len(rows) - 1, r, measured))
        it["recorded"] = True
        r -= config.step
        if r <= 0:
            state["termination"] = TERM_EXHAUSTED
            return True
        state["r"] = r
        sim.apply_allocation(service, r)
        return False

    sim = Simulation(SimConfig(topology, alloc, duration, seed=config.seed, telemetry_bucket_s=bucket_s),
                     stream, controller_hook=hook)
    tel = sim.run()
    if not rows:
        raise NoFeasibleRow(
            f"service {service!r} already fails at its initial allocation of {config.initial_replicas} replicas")
    profile = LprProfile(
        service=service, rows=rows, backpressure_threshold=config.backpressure_threshold,
        cpu_per_replica=node.cpu_per_replica, samples_consumed=len(rows) * spi,
        termination=state["termination"] or TERM_EXHAUSTED)
    return ExplorationRecord(profile, snapshots, iterations, tel.completed_buckets)


def assemble_model_inputs(profiles: Mapping[str, LprProfile], grid: Sequence[float],
                          topology: Topology, overestimation: Optional[Mapping[str, float]] = None,
                          classes: Optional[Sequence[str]] = None,
                          load: Optional[Mapping[str, Mapping[str, float]]] = None) -> OptimizerInputs:
    """Latency matrices, row costs and LPR rows for every profiled service.

    Row costs are the recorded profiling costs unless ``load`` (per-service
    total load vectors) is given, in which case they are recomputed for it.
    """
    grid = check_grid(grid)
    wanted = list(classes) if classes is not None else list(topology.classes)
    needed = {s for cid in wanted for s in topology.classes[cid].path}
    services: Dict[str, ServiceInputs] = {}
    for svc in sorted(needed, key=list(topology.nodes).index):
        prof = profiles.get(svc)
        if prof is None or not prof.rows:
            raise MissingProfile(f"service {svc!r} has no profile rows")
        D: Dict[str, np.ndarray] = {}
        for cid in topology.classes_at(svc):
            if cid not in wanted:
                continue
            mat = []
            for row in prof.rows:
                t = row.quantiles.get(cid)
                if t is None:
                    raise MissingProfile(f"service {svc!r} has no latency table for class {cid!r}")
                if tuple(t.grid) != grid:
                    raise GridMismatch(f"{svc}/{cid}: profile grid {tuple(t.grid)} differs from {grid}")
                if not t.monotone:
                    raise GridMismatch(f"{svc}/{cid}: latency table is not monotone in percentile")
                mat.append(list(t.values))
            D[cid] = np.asarray(mat, dtype=float)
        if load is not None and sum(load.get(svc, {}).values()) > 0:
            cur = {c: v for c, v in load[svc].items() if v > 0}
            R = np.array([max(resource_cost(row.lpr, cur, prof.cpu_per_replica), prof.cpu_per_replica)
                          for row in prof.rows], dtype=float)
        else:
            R = np.array([row.cpu_cost for row in prof.rows], dtype=float)
        services[svc] = ServiceInputs(svc, D, R, [dict(row.lpr) for row in prof.rows])
    cls = {}
    for cid in wanted:
        c = topology.classes[cid]
        cls[cid] = ClassInputs(cid, enumerate_chains(topology, c), c.sla,
                               float((overestimation or {}).get(cid, 1.0)))
    return OptimizerInputs(grid, services, cls)


def calibration_history(snapshots: Sequence[Snapshot], services: Sequence[str]):
    """Turn exploration snapshots into ``(row choice, measured tables)`` pairs.

    While one service is explored the others sit at their initial allocation,
    which is row 0 of their own profile.
    """
    out = []
    for s in snapshots:
        delta = {svc: 0 for svc in services}
        if s.service in delta:
            delta[s.service] = s.row
        out.append((delta, s.measured))
    return out


# -- profile store --------------------------------------------------------

def empty_store(grid: Sequence[float]) -> dict:
    return {"schema_version": PROFILE_STORE_VERSION, "grid": list(grid), "profiles": {}, "snapshots": []}


def update_store(store: dict, record: ExplorationRecord) -> dict:
    """Replace one service's entry (and its snapshots), leaving the rest untouched."""
    svc = record.profile.service
    store["profiles"][svc] = record.profile.to_dict()
    store["snapshots"] = [s for s in store.get("snapshots", []) if s["service"] != svc]
    store["snapshots"].extend(s.to_dict() for s in record.snapshots)
    return store


def store_profiles(store: Mapping) -> Dict[str, LprProfile]:
    return {s: LprProfile.from_dict(p) for s, p in store["profiles"].items()}


def store_snapshots(store: Mapping) -> List[Snapshot]:
    return [Snapshot.from_dict(s) for s in store.get("snapshots", [])]


def save_store(path: str, store: Mapping) -> None:
    tmp = f"{path}.tmp"
    with open(tmp, "w") as fh:
        json.dump(store, fh, indent=1)
    os.replace(tmp, path)


def load_store(path: str) -> dict:
    with open(path) as fh:
        store = json.load(fh)
    if store.get("schema_version") != PROFILE_STORE_VERSION:
        raise ConfigError(f"unsupported profile store version {store.get('schema_version')!r}")
    return store
