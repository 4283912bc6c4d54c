"""Backpressure-free utilization threshold of a single service.

The harness is a workload generator feeding ``fan_in`` proxies, each calling
the tested service over nested RPC.  The tested service runs one replica whose
core count is swept upward.  While the tested service is starved, proxy
threads pile up waiting on it and the proxies' own p99 rises; once extra
cores stop changing the proxies' p99, the service is backpressure-free.
"""
from __future__ import annotations

import csv
import json
import math
from dataclasses import asdict, dataclass, field
from typing import Dict, List, Mapping, Optional, Sequence

import numpy as np

from .errors import ConfigError, NoConvergence, SweepTooShort
from .model import NESTED_RPC, ServiceNode, ServiceTimeModel, Topology, build_topology
from .simulator import SimConfig, run_simulation
from .stats import TWO_SIDED, empirical_quantile, welch_t_test
from .workload import LoadPattern, make_stream

MQ_THRESHOLD = 0.95


@dataclass(frozen=True)
class BpProfileConfig:
    cpu_limit_sweep: Sequence[int]
    load: Mapping[str, float]
    samples_per_limit: int = 10
    alpha: float = 0.05
    bucket_s: float = 60.0
    warmup_buckets: int = 1
    fan_in: int = 2
    proxy_threads: int = 8
    proxy_work_ms: float = 0.05
    seed: int = 0

    def validate(self) -> None:
        sweep = list(self.cpu_limit_sweep)
        if len(sweep) < 2:
            raise SweepTooShort("the CPU-limit sweep needs at least two points")
        if any(b <= a for a, b in zip(sweep, sweep[1:])):
            raise SweepTooShort("the CPU-limit sweep must be strictly ascending")
        if any(int(c) != c or c < 1 for c in sweep):
            raise ConfigError("CPU limits must be positive integers")
        if self.samples_per_limit < 2:
            raise ConfigError("need at least two samples per limit for the t-test")
        if not self.load or any(v < 0 for v in self.load.values()) or sum(self.load.values()) <= 0:
            raise ConfigError("profiling load must be a non-empty, positive load vector")
        if self.fan_in < 1 or self.proxy_threads < 1:
            raise ConfigError("fan_in and proxy_threads must be >= 1")

    @classmethod
    def from_dict(cls, d: Mapping) -> "BpProfileConfig":
        return cls(**dict(d))


@dataclass
class SweepPoint:
    cpu_limit: int
    proxy_p99_mean: float
    proxy_p99_std: float
    service_p99: float
    utilization: float
    proxy_p99_buckets: List[float] = field(default_factory=list)


@dataclass
class BpProfileResult:
    service: str
    threshold_utilization: float
    converged_at: Optional[int]
    sweep_log: List[SweepPoint]
    mq_only: bool = False

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: Mapping) -> "BpProfileResult":
        log = [SweepPoint(**p) for p in d["sweep_log"]]
        return cls(d["service"], d["threshold_utilization"], d["converged_at"], log, d.get("mq_only", False))

    def to_json(self, path) -> None:
        with open(path, "w") as fh:
            json.dump(self.to_dict(), fh, indent=2)

    def sweep_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["cpu_limit", "proxy_p99_mean_ms", "proxy_p99_std_ms", "service_p99_ms", "utilization"])
            for p in self.sweep_log:
                w.writerow([p.cpu_limit, p.proxy_p99_mean, p.proxy_p99_std, p.service_p99, p.utilization])


def _harness(service: ServiceNode, config: BpProfileConfig, limit: int) -> Topology:
    classes = [c for c, v in config.load.items() if v > 0]
    proxies = [f"proxy{i}" for i in range(config.fan_in)]
    tested_times = {}
    proxy_times = {}
    hcls = []
    for p in proxies:
        for c in classes:
            hid = f"{c}@{p}"
            tested_times[hid] = service.service_time[c].to_dict()
            proxy_times[hid] = {"kind": "deterministic", "mean_ms": config.proxy_work_ms}
            hcls.append({"id": hid, "path": [p, service.id], "sla": {"percentile": 99, "latency_ms": 1e9}})
    nodes = [{"id": p, "cpu_per_replica": 1, "worker_threads_per_replica": config.proxy_threads,
              "service_time": {h["id"]: proxy_times[h["id"]] for h in hcls if h["path"][0] == p}}
             for p in proxies]
    nodes.append({
        "id": service.id,
        "cpu_per_replica": limit,
        # the tested service must be able to keep every allotted core busy
        "worker_threads_per_replica": max(service.worker_threads_per_replica, limit),
        "service_time": tested_times,
    })
    edges = [{"parent": p, "child": service.id, "kind": NESTED_RPC} for p in proxies]
    return build_topology({"services": nodes, "edges": edges, "classes": hcls})


def _harness_stream(config: BpProfileConfig, duration: float, seed: int):
    mix = {}
    for i in range(config.fan_in):
        for c, v in config.load.items():
            if v > 0:
                mix[f"{c}@proxy{i}"] = v / config.fan_in
    total = sum(mix.values())
    return make_stream(LoadPattern("constant", total, mix), duration, seed)


def profile_backpressure_threshold(service: ServiceNode, config: BpProfileConfig,
                                   mq_only: bool = False) -> BpProfileResult:
    """Sweep the CPU limit of ``service`` and return its backpressure-free utilization.

    Convergence is the first pair of consecutive limits whose per-bucket proxy
    p99 samples a two-sided Welch test cannot tell apart; the threshold is the
    utilization at the first limit of that pair.
    """
    if mq_only:
        return BpProfileResult(service.id, MQ_THRESHOLD, None, [], mq_only=True)
    config.validate()
    for c in config.load:
        if c not in service.service_time:
            raise ConfigError(f"service {service.id!r} has no service time for class {c!r}")
    n_buckets = config.samples_per_limit + config.warmup_buckets
    duration = n_buckets * config.bucket_s
    stream = _harness_stream(config, duration, config.seed)
    proxies = [f"proxy{i}" for i in range(config.fan_in)]
    log: List[SweepPoint] = []
    for k, limit in enumerate(config.cpu_limit_sweep):
        topo = _harness(service, config, limit)
        alloc = {s: 1 for s in topo.nodes}
        tel = run_simulation(SimConfig(topo, alloc, duration, seed=config.seed + k,
                                       telemetry_bucket_s=config.bucket_s), stream)
        b0, b1 = config.warmup_buckets, n_buckets
        per_bucket = []
        for b in range(b0, b1):
            x = np.concatenate([tel.service_samples(p, None, b, b + 1) for p in proxies])
            per_bucket.append(empirical_quantile(x, 99) if x.size else 0.0)
        own = tel.service_samples(service.id, None, b0, b1)
        arr = np.asarray(per_bucket)
        log.append(SweepPoint(
            cpu_limit=int(limit),
            proxy_p99_mean=float(arr.mean()),
            proxy_p99_std=float(arr.std(ddof=1)),
            service_p99=empirical_quantile(own, 99) if own.size else math.nan,
            utilization=tel.utilization(service.id, b0, b1),
            proxy_p99_buckets=[float(v) for v in arr],
        ))
        if k == 0:
            continue
        res = welch_t_test(log[k - 1].proxy_p99_buckets, log[k].proxy_p99_buckets, config.alpha, TWO_SIDED)
        if not res.rejected:
            thr = log[k - 1].utilization
            if not thr < 1.0:
                thr = math.nextafter(1.0, 0.0)
            return BpProfileResult(service.id, thr, k, log)
    raise NoConvergence(f"proxy latency for {service.id!r} never converged; extend the CPU-limit sweep")
