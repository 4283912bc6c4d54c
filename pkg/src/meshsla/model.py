"""Domain types for a microservice mesh and the load-per-replica arithmetic.

A :class:`Topology` is a DAG of :class:`ServiceNode` objects plus a set of
:class:`RequestClass` objects, each following a fixed path through the mesh.
Paths are listed in call order (pre-order of the call tree): the caller of the
visit at position ``k`` is the most recent earlier visit whose service has an
edge into ``path[k]``.  A plain walk ``A -> B -> C`` is the common case.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Dict, List, Mapping, Optional, Sequence, Tuple

from .errors import (
    ConfigError,
    CycleError,
    DanglingReference,
    DivisionByZeroThreshold,
    MissingServiceTime,
)

NESTED_RPC = "nested_rpc"
EVENT_DRIVEN_RPC = "event_driven_rpc"
MESSAGE_QUEUE = "message_queue"
COMM_KINDS = (NESTED_RPC, EVENT_DRIVEN_RPC, MESSAGE_QUEUE)

SERVICE_TIME_KINDS = ("deterministic", "exponential", "lognormal")

# per-class rates in requests/second, keyed by class id
LoadVector = Dict[str, float]

_CEIL_EPS = 1e-9


@dataclass(frozen=True)
class ServiceTimeModel:
    """CPU work per request in milliseconds.

    ``sigma`` is the log-space standard deviation and only matters for the
    lognormal kind; ``mean_ms`` is always the mean of the distribution.
    """

    kind: str
    mean_ms: float
    sigma: float = 0.0

    def __post_init__(self):
        if self.kind not in SERVICE_TIME_KINDS:
            raise ConfigError(f"unknown service time kind {self.kind!r}")
        if not self.mean_ms > 0:
            raise ConfigError("service time mean must be positive")
        if self.kind == "lognormal" and self.sigma < 0:
            raise ConfigError("lognormal sigma must be non-negative")

    @classmethod
    def from_dict(cls, d: Mapping) -> "ServiceTimeModel":
        return cls(kind=d["kind"], mean_ms=float(d["mean_ms"]), sigma=float(d.get("sigma", 0.0)))

    def to_dict(self) -> dict:
        d = {"kind": self.kind, "mean_ms": self.mean_ms}
        if self.kind == "lognormal":
            d["sigma"] = self.sigma
        return d


@dataclass(frozen=True)
class ServiceNode:
    id: str
    cpu_per_replica: int = 1
    mem_per_replica: float = 0.0
    worker_threads_per_replica: int = 1
    service_time: Mapping[str, ServiceTimeModel] = field(default_factory=dict)
    # None means 4x the worker pool
    daemon_threads_per_replica: Optional[int] = None

    def __post_init__(self):
        if int(self.cpu_per_replica) != self.cpu_per_replica or self.cpu_per_replica < 1:
            raise ConfigError(f"{self.id}: cpu_per_replica must be an integer >= 1")
        if self.worker_threads_per_replica < 1:
            raise ConfigError(f"{self.id}: worker_threads_per_replica must be >= 1")
        if self.daemon_threads_per_replica is not None and self.daemon_threads_per_replica < 1:
            raise ConfigError(f"{self.id}: daemon_threads_per_replica must be >= 1")

    @property
    def daemon_pool(self) -> int:
        if self.daemon_threads_per_replica is None:
            return 4 * self.worker_threads_per_replica
        return self.daemon_threads_per_replica


@dataclass(frozen=True)
class SlaTarget:
    percentile: float
    latency_ms: float

    def __post_init__(self):
        if not 0 < self.percentile < 100:
            raise ConfigError("SLA percentile must lie in (0, 100)")
        if not self.latency_ms > 0:
            raise ConfigError("SLA latency must be positive")


@dataclass(frozen=True)
class RequestClass:
    id: str
    path: Tuple[str, ...]
    sla: SlaTarget
    priority: Optional[str] = None

    def __post_init__(self):
        if not self.path:
            raise ConfigError(f"class {self.id}: empty path")
        if self.priority not in (None, "high", "low"):
            raise ConfigError(f"class {self.id}: priority must be high, low or null")


@dataclass(frozen=True)
class Visit:
    """One step of a class's call tree."""

    service: str
    caller: int  # index of the calling visit, -1 for the root
    kind: Optional[str]  # communication kind of the edge from the caller
    children: Tuple[int, ...]


@dataclass(frozen=True)
class Topology:
    nodes: Mapping[str, ServiceNode]
    edges: Mapping[Tuple[str, str], str]
    classes: Mapping[str, RequestClass]

    def call_tree(self, class_id: str) -> Tuple[Visit, ...]:
        return _call_tree(self.classes[class_id].path, self.edges)

    def classes_at(self, service: str) -> List[str]:
        """Class ids whose path touches ``service`` (topology order)."""
        return [c.id for c in self.classes.values() if service in c.path]

    def services_of(self, class_id: str) -> List[str]:
        return [s for s, _ in enumerate_chains(self, self.classes[class_id])]

    def parents(self, service: str) -> List[Tuple[str, str]]:
        return [(p, k) for (p, c), k in self.edges.items() if c == service]

    def is_mq_only(self, service: str) -> bool:
        """True when every inbound and outbound edge is a message queue."""
        kinds = [k for (p, c), k in self.edges.items() if service in (p, c)]
        return bool(kinds) and all(k == MESSAGE_QUEUE for k in kinds)


Chain = Tuple[Tuple[str, int], ...]


def _call_tree(path: Sequence[str], edges: Mapping[Tuple[str, str], str]) -> Tuple[Visit, ...]:
    callers: List[int] = []
    kinds: List[Optional[str]] = []
    for k, svc in enumerate(path):
        if k == 0:
            callers.append(-1)
            kinds.append(None)
            continue
        for i in range(k - 1, -1, -1):
            if (path[i], svc) in edges:
                callers.append(i)
                kinds.append(edges[(path[i], svc)])
                break
        else:
            raise DanglingReference(f"path step {svc!r} at position {k} has no caller earlier in the path")
    children: List[List[int]] = [[] for _ in path]
    for k, c in enumerate(callers):
        if c >= 0:
            children[c].append(k)
    return tuple(Visit(path[k], callers[k], kinds[k], tuple(children[k])) for k in range(len(path)))


def _service_from_dict(d: Mapping) -> ServiceNode:
    times = {cid: ServiceTimeModel.from_dict(m) for cid, m in d.get("service_time", {}).items()}
    return ServiceNode(
        id=d["id"],
        cpu_per_replica=int(d.get("cpu_per_replica", 1)),
        mem_per_replica=float(d.get("mem_per_replica", 0.0)),
        worker_threads_per_replica=int(d.get("worker_threads_per_replica", 1)),
        service_time=times,
        daemon_threads_per_replica=d.get("daemon_threads_per_replica"),
    )


def _check_acyclic(ids: Sequence[str], edges: Mapping[Tuple[str, str], str]) -> None:
    indeg = {s: 0 for s in ids}
    out: Dict[str, List[str]] = {s: [] for s in ids}
    for p, c in edges:
        indeg[c] += 1
        out[p].append(c)
    ready = [s for s in ids if indeg[s] == 0]
    seen = 0
    while ready:
        s = ready.pop()
        seen += 1
        for c in out[s]:
            indeg[c] -= 1
            if indeg[c] == 0:
                ready.append(c)
    if seen != len(ids):
        stuck = sorted(s for s in ids if indeg[s] > 0)
        raise CycleError(f"edge graph has a cycle through {stuck}")


def build_topology(config: Mapping) -> Topology:
    """Build and validate a :class:`Topology` from its JSON-style description.

    ``config`` has ``services``, ``edges`` and ``classes`` lists, as in the
    ``topology`` section of a scenario file.
    """
    try:
        services = [_service_from_dict(s) for s in config["services"]]
        raw_edges = config.get("edges", [])
        raw_classes = config.get("classes", [])
    except KeyError as exc:
        raise ConfigError(f"topology is missing key {exc}") from None

    nodes: Dict[str, ServiceNode] = {}
    for s in services:
        if s.id in nodes:
            raise ConfigError(f"duplicate service id {s.id!r}")
        nodes[s.id] = s

    edges: Dict[Tuple[str, str], str] = {}
    for e in raw_edges:
        p, c, kind = e["parent"], e["child"], e.get("kind", NESTED_RPC)
        for end in (p, c):
            if end not in nodes:
                raise DanglingReference(f"edge references unknown service {end!r}")
        if kind not in COMM_KINDS:
            raise ConfigError(f"unknown communication kind {kind!r}")
        edges[(p, c)] = kind
    _check_acyclic(list(nodes), edges)

    classes: Dict[str, RequestClass] = {}
    for c in raw_classes:
        sla = SlaTarget(float(c["sla"]["percentile"]), float(c["sla"]["latency_ms"]))
        rc = RequestClass(id=c["id"], path=tuple(c["path"]), sla=sla, priority=c.get("priority"))
        if rc.id in classes:
            raise ConfigError(f"duplicate class id {rc.id!r}")
        for svc in rc.path:
            if svc not in nodes:
                raise DanglingReference(f"class {rc.id!r} path names unknown service {svc!r}")
            if rc.id not in nodes[svc].service_time:
                raise MissingServiceTime(f"service {svc!r} has no service time for class {rc.id!r}")
        if any((p, rc.path[0]) in edges for p in rc.path[1:]):
            raise ConfigError(f"class {rc.id!r}: path[0] must not be called from within the path")
        _call_tree(rc.path, edges)
        classes[rc.id] = rc
    return Topology(nodes=nodes, edges=edges, classes=classes)


def topology_to_dict(topo: Topology) -> dict:
    services = []
    for s in topo.nodes.values():
        d = {
            "id": s.id,
            "cpu_per_replica": s.cpu_per_replica,
            "mem_per_replica": s.mem_per_replica,
            "worker_threads_per_replica": s.worker_threads_per_replica,
            "service_time": {k: m.to_dict() for k, m in s.service_time.items()},
        }
        if s.daemon_threads_per_replica is not None:
            d["daemon_threads_per_replica"] = s.daemon_threads_per_replica
        services.append(d)
    edges = [{"parent": p, "child": c, "kind": k} for (p, c), k in topo.edges.items()]
    classes = [
        {
            "id": c.id,
            "path": list(c.path),
            "priority": c.priority,
            "sla": {"percentile": c.sla.percentile, "latency_ms": c.sla.latency_ms},
        }
        for c in topo.classes.values()
    ]
    return {"services": services, "edges": edges, "classes": classes}


def enumerate_chains(topology: Topology, cls: RequestClass) -> Chain:
    """Fold a class path into a chain of ``(service, access multiplicity)``.

    Order follows the first access of each service.
    """
    counts: Dict[str, int] = {}
    for svc in cls.path:
        counts[svc] = counts.get(svc, 0) + 1
    return tuple(counts.items())


def _ceil(x: float) -> int:
    # A/(A/r) can land a hair above r in floating point
    return math.ceil(x - _CEIL_EPS * max(1.0, abs(x)))


def _replicas_needed(lpr: Mapping[str, float], total_load: Mapping[str, float]) -> int:
    need = 0
    for cid, load in total_load.items():
        if load <= 0:
            continue
        a = lpr.get(cid, 0.0)
        if a <= 0:
            raise DivisionByZeroThreshold(f"class {cid!r} has load {load} but a zero threshold")
        need = max(need, _ceil(load / a))
    return need


def resource_cost(lpr: Mapping[str, float], total_load: Mapping[str, float], cpu_per_replica: float) -> float:
    """Cores used when every replica carries at most ``lpr`` per class."""
    return _replicas_needed(lpr, total_load) * cpu_per_replica


def replica_count(lpr: Mapping[str, float], total_load: Mapping[str, float], min_replicas: int = 1) -> int:
    return max(_replicas_needed(lpr, total_load), min_replicas)


@dataclass(frozen=True)
class QuantileTable:
    """Latencies (ms) at an ascending percentile grid."""

    grid: Tuple[float, ...]
    values: Tuple[float, ...]
    sample_count: int = 0

    def __post_init__(self):
        if len(self.grid) != len(self.values):
            raise ConfigError("quantile grid and values differ in length")
        if any(b <= a for a, b in zip(self.grid, self.grid[1:])):
            raise ConfigError("quantile grid must be strictly ascending")
        if any(not 0 < p <= 100 for p in self.grid):
            raise ConfigError("quantile grid must lie in (0, 100]")

    @property
    def monotone(self) -> bool:
        return all(b >= a for a, b in zip(self.values, self.values[1:]))

    def at(self, p: float) -> float:
        for g, v in zip(self.grid, self.values):
            if abs(g - p) < 1e-9:
                return v
        raise KeyError(f"percentile {p} is not on the grid {self.grid}")

    @classmethod
    def from_samples(cls, samples, grid: Sequence[float]) -> "QuantileTable":
        from .stats import quantiles

        vals = quantiles(samples, grid)
        return cls(tuple(float(g) for g in grid), tuple(float(v) for v in vals), len(samples))

    def to_dict(self) -> dict:
        return {"grid": list(self.grid), "values": list(self.values), "sample_count": self.sample_count}

    @classmethod
    def from_dict(cls, d: Mapping) -> "QuantileTable":
        return cls(tuple(d["grid"]), tuple(d["values"]), int(d.get("sample_count", 0)))


@dataclass
class ProfileRow:
    """One explored load-per-replica point of a service."""

    lpr: LoadVector
    quantiles: Dict[str, QuantileTable]
    cpu_cost: float
    utilization: float
    replicas: int = 0
    # per-replica load samples (rps) recorded at this row, per class
    load_samples: Dict[str, List[float]] = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "lpr": dict(self.lpr),
            "quantiles": {k: q.to_dict() for k, q in self.quantiles.items()},
            "cpu_cost": self.cpu_cost,
            "utilization": self.utilization,
            "replicas": self.replicas,
            "load_samples": {k: list(v) for k, v in self.load_samples.items()},
        }

    @classmethod
    def from_dict(cls, d: Mapping) -> "ProfileRow":
        return cls(
            lpr={k: float(v) for k, v in d["lpr"].items()},
            quantiles={k: QuantileTable.from_dict(q) for k, q in d["quantiles"].items()},
            cpu_cost=float(d["cpu_cost"]),
            utilization=float(d["utilization"]),
            replicas=int(d.get("replicas", 0)),
            load_samples={k: [float(x) for x in v] for k, v in d.get("load_samples", {}).items()},
        )


@dataclass
class LprProfile:
    service: str
    rows: List[ProfileRow]
    backpressure_threshold: float
    cpu_per_replica: int = 1
    samples_consumed: int = 0
    termination: str = ""

    @property
    def classes(self) -> List[str]:
        return list(self.rows[0].lpr) if self.rows else []

    def to_dict(self) -> dict:
        return {
            "service": self.service,
            "backpressure_threshold": self.backpressure_threshold,
            "cpu_per_replica": self.cpu_per_replica,
            "samples_consumed": self.samples_consumed,
            "termination": self.termination,
            "rows": [r.to_dict() for r in self.rows],
        }

    @classmethod
    def from_dict(cls, d: Mapping) -> "LprProfile":
        return cls(
            service=d["service"],
            rows=[ProfileRow.from_dict(r) for r in d["rows"]],
            backpressure_threshold=float(d["backpressure_threshold"]),
            cpu_per_replica=int(d.get("cpu_per_replica", 1)),
            samples_consumed=int(d.get("samples_consumed", 0)),
            termination=d.get("termination", ""),
        )
