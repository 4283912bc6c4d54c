"""Discrete-event simulation of a microservice mesh.

Every replica owns ``worker_threads_per_replica`` threads and
``cpu_per_replica`` cores.  A visit waits for a thread, then for a core,
computes, and then issues its downstream calls in path order:

* ``nested_rpc``: the calling thread stays blocked for the downstream round trip;
* ``event_driven_rpc``: the thread is handed back once a daemon slot takes over
  the downstream round trip (the daemon pool is finite, so waiting for a
  daemon slot still holds the thread);
* ``message_queue``: the message is published and the caller moves on; the
  consumer picks it up when one of its workers frees.

Requests are spread over the active replicas of a service round-robin.  The
recorded per-service response time of a visit is its own thread wait, core
wait, daemon wait and compute time; time spent waiting on downstream calls is
excluded.  End-to-end latency runs from arrival until the last visit of the
request finishes.
"""
from __future__ import annotations

import csv
import heapq
import io
import json
import math
from collections import deque
from dataclasses import dataclass, field
from typing import Callable, Dict, List, Mapping, Optional, Sequence

import numpy as np

from .errors import ArrivalGapError, ConfigError, EmptyWindow, UnknownService
from .model import EVENT_DRIVEN_RPC, MESSAGE_QUEUE, NESTED_RPC, Topology
from .stats import empirical_quantile

_KIND_CODE = {None: 0, NESTED_RPC: 1, EVENT_DRIVEN_RPC: 2, MESSAGE_QUEUE: 3}
_BLOCK = 2048


@dataclass
class SimConfig:
    topology: Topology
    allocation: Mapping[str, int]
    duration_s: float
    seed: int = 0
    telemetry_bucket_s: float = 60.0
    load_sample_s: float = 1.0
    rpc_daemon_pool_per_replica: Optional[int] = None
    mq_poll_batch: int = 1
    min_replicas: int = 1

    def validate(self) -> None:
        if not self.duration_s > 0:
            raise ConfigError("duration must be positive")
        if not self.telemetry_bucket_s > 0 or not self.load_sample_s > 0:
            raise ConfigError("bucket and load-sample lengths must be positive")
        if self.mq_poll_batch < 1:
            raise ConfigError("mq_poll_batch must be >= 1")
        for svc in self.topology.nodes:
            if svc not in self.allocation:
                raise ConfigError(f"no allocation for service {svc!r}")
        for svc, r in self.allocation.items():
            if svc not in self.topology.nodes:
                raise UnknownService(svc)
            if r < max(1, self.min_replicas):
                raise ConfigError(f"service {svc!r}: replica count {r} below minimum")


@dataclass(frozen=True)
class ThrottleEvent:
    service: str
    start_s: float
    end_s: float
    cpu_factor: float

    def __post_init__(self):
        if not 0 < self.cpu_factor <= 1:
            raise ConfigError("cpu_factor must lie in (0, 1]")
        if not self.end_s > self.start_s:
            raise ConfigError("throttle window is empty")


class _Sampler:
    """Pre-drawn service times (seconds) for one (service, class) pair."""

    __slots__ = ("kind", "mean", "sigma", "rng", "buf", "pos")

    def __init__(self, model, rng: np.random.Generator):
        self.kind = model.kind
        self.mean = model.mean_ms / 1000.0
        self.sigma = model.sigma
        self.rng = rng
        self.buf: List[float] = []
        self.pos = 0

    def draw(self) -> float:
        if self.kind == "deterministic":
            return self.mean
        if self.pos >= len(self.buf):
            if self.kind == "exponential":
                arr = self.rng.exponential(self.mean, _BLOCK)
            else:
                mu = math.log(self.mean) - 0.5 * self.sigma**2
                arr = self.rng.lognormal(mu, self.sigma, _BLOCK)
            self.buf = arr.tolist()
            self.pos = 0
        v = self.buf[self.pos]
        self.pos += 1
        return v


class _Replica:
    __slots__ = (
        "threads_free", "threads", "cores_free", "thread_hi", "thread_lo", "core_hi", "core_lo",
        "daemon_free", "daemons", "daemon_q", "draining",
    )

    def __init__(self, threads: int, cores: int, daemons: int):
        self.threads = threads
        self.threads_free = threads
        self.cores_free = cores
        self.thread_hi: deque = deque()
        self.thread_lo: deque = deque()
        self.core_hi: deque = deque()
        self.core_lo: deque = deque()
        self.daemons = daemons
        self.daemon_free = daemons
        self.daemon_q: deque = deque()
        self.draining = False

    def idle(self) -> bool:
        return (self.threads_free == self.threads and self.daemon_free == self.daemons
                and not self.thread_hi and not self.thread_lo)

    def queued(self) -> int:
        return len(self.thread_hi) + len(self.thread_lo) + len(self.core_hi) + len(self.core_lo)


class _Service:
    __slots__ = ("idx", "id", "cores", "threads", "daemons", "active", "present", "rr")

    def __init__(self, idx: int, node, daemon_override: Optional[int]):
        self.idx = idx
        self.id = node.id
        self.cores = node.cpu_per_replica
        self.threads = node.worker_threads_per_replica
        self.daemons = daemon_override if daemon_override is not None else node.daemon_pool
        self.active: List[_Replica] = []
        self.present: List[_Replica] = []
        self.rr = 0

    def new_replica(self) -> _Replica:
        return _Replica(self.threads, self.cores, self.daemons)


class _Request:
    __slots__ = ("cls", "arrival", "outstanding")

    def __init__(self, cls: int, arrival: float, outstanding: int):
        self.cls = cls
        self.arrival = arrival
        self.outstanding = outstanding


class _Task:
    __slots__ = (
        "req", "k", "svc", "rep", "parent", "arrive", "mark", "local", "pos",
        "thread", "daemon", "low", "batch", "mq",
    )

    def __init__(self, req: _Request, k: int, svc: int, parent: Optional["_Task"], low: bool, mq: bool):
        self.req = req
        self.k = k
        self.svc = svc
        self.parent = parent
        self.rep: Optional[_Replica] = None
        self.arrive = 0.0
        self.mark = 0.0
        self.local = 0.0
        self.pos = 0
        self.thread = False
        self.daemon = False
        self.low = low
        self.batch: Optional[List["_Task"]] = None
        self.mq = mq


class Telemetry:
    """Time-bucketed measurements of one simulation run.

    Per-visit response times and end-to-end latencies are stored in
    milliseconds, in completion order, together with their bucket index, so
    any bucket range is a contiguous slice.
    """

    def __init__(self, services: Sequence[str], classes: Sequence[str], n_buckets: int,
                 bucket_s: float, load_sample_s: float, n_load_samples: int):
        self.services = list(services)
        self.classes = list(classes)
        self.bucket_s = bucket_s
        self.load_sample_s = load_sample_s
        self.n_buckets = n_buckets
        S, C = len(services), len(classes)
        self._sidx = {s: i for i, s in enumerate(services)}
        self._cidx = {c: i for i, c in enumerate(classes)}
        self.busy = np.zeros((n_buckets, S))  # busy core-seconds
        self.alloc = np.zeros((n_buckets, S))  # allocated core-seconds
        self.replicas = np.zeros((n_buckets, S), dtype=np.int64)  # active replicas at bucket start
        self.queue_depth = np.zeros((n_buckets, S), dtype=np.int64)  # at bucket end
        self.visit_arrivals = np.zeros((n_buckets, S, C), dtype=np.int64)
        self.visit_completions = np.zeros((n_buckets, S, C), dtype=np.int64)
        self.load_counts = np.zeros((n_load_samples, S, C), dtype=np.int64)
        self.arrivals = np.zeros((n_buckets, C), dtype=np.int64)
        self.completions = np.zeros((n_buckets, C), dtype=np.int64)
        self.dropped = np.zeros((n_buckets, C), dtype=np.int64)
        self.completed_buckets = 0
        self.end_s = 0.0
        self.in_flight = 0
        # raw sample logs
        self._v_bucket: List[int] = []
        self._v_svc: List[int] = []
        self._v_cls: List[int] = []
        self._v_ms: List[float] = []
        self._e_bucket: List[int] = []
        self._e_cls: List[int] = []
        self._e_ms: List[float] = []
        self._v_off = [0] * (n_buckets + 1)
        self._e_off = [0] * (n_buckets + 1)
        self._frozen: Optional[dict] = None

    # -- bookkeeping used by the simulator --------------------------------
    def _close_bucket(self, b: int) -> None:
        self._v_off[b + 1] = len(self._v_ms)
        self._e_off[b + 1] = len(self._e_ms)
        self.completed_buckets = b + 1
        self._frozen = None

    def _arrays(self) -> dict:
        if self._frozen is None:
            self._frozen = {
                "vb": np.asarray(self._v_bucket, dtype=np.int64),
                "vs": np.asarray(self._v_svc, dtype=np.int64),
                "vc": np.asarray(self._v_cls, dtype=np.int64),
                "vm": np.asarray(self._v_ms, dtype=float),
                "eb": np.asarray(self._e_bucket, dtype=np.int64),
                "ec": np.asarray(self._e_cls, dtype=np.int64),
                "em": np.asarray(self._e_ms, dtype=float),
            }
        return self._frozen

    def _range(self, b0: Optional[int], b1: Optional[int]):
        b0 = 0 if b0 is None else b0
        b1 = self.completed_buckets if b1 is None else b1
        if not 0 <= b0 < b1 <= self.completed_buckets:
            raise EmptyWindow(f"bucket window [{b0}, {b1}) outside recorded range [0, {self.completed_buckets})")
        return b0, b1

    # -- queries -----------------------------------------------------------
    def service_samples(self, service: str, class_id: Optional[str] = None,
                        b0: Optional[int] = None, b1: Optional[int] = None) -> np.ndarray:
        """Per-visit response times (ms) at ``service`` completed in buckets [b0, b1)."""
        b0, b1 = self._range(b0, b1)
        a = self._arrays()
        lo, hi = self._v_off[b0], self._v_off[b1]
        mask = a["vs"][lo:hi] == self._sidx[service]
        if class_id is not None:
            mask &= a["vc"][lo:hi] == self._cidx[class_id]
        return a["vm"][lo:hi][mask]

    def e2e_samples(self, class_id: str, b0: Optional[int] = None, b1: Optional[int] = None) -> np.ndarray:
        b0, b1 = self._range(b0, b1)
        a = self._arrays()
        lo, hi = self._e_off[b0], self._e_off[b1]
        mask = a["ec"][lo:hi] == self._cidx[class_id]
        return a["em"][lo:hi][mask]

    def utilization(self, service: str, b0: Optional[int] = None, b1: Optional[int] = None) -> float:
        b0, b1 = self._range(b0, b1)
        s = self._sidx[service]
        alloc = self.alloc[b0:b1, s].sum()
        if alloc <= 0:
            return 0.0
        return float(min(1.0, self.busy[b0:b1, s].sum() / alloc))

    def load(self, service: str, b0: Optional[int] = None, b1: Optional[int] = None) -> Dict[str, float]:
        """Mean per-class visit rate (rps) at ``service`` over the window."""
        b0, b1 = self._range(b0, b1)
        s = self._sidx[service]
        secs = (b1 - b0) * self.bucket_s
        counts = self.visit_arrivals[b0:b1, s, :].sum(axis=0)
        return {c: float(counts[i]) / secs for i, c in enumerate(self.classes) if counts[i] > 0}

    def load_samples(self, service: str, class_id: str, b0: Optional[int] = None,
                     b1: Optional[int] = None) -> np.ndarray:
        """Per-class visit rate (rps) at ``service`` for every load-sample slot in the window."""
        b0, b1 = self._range(b0, b1)
        per = int(round(self.bucket_s / self.load_sample_s))
        counts = self.load_counts[b0 * per:b1 * per, self._sidx[service], self._cidx[class_id]]
        return counts / self.load_sample_s

    def class_rate(self, class_id: str, b0: Optional[int] = None, b1: Optional[int] = None) -> float:
        b0, b1 = self._range(b0, b1)
        return float(self.arrivals[b0:b1, self._cidx[class_id]].sum()) / ((b1 - b0) * self.bucket_s)

    def service_p99(self, service: str, b: int, p: float = 99.0) -> float:
        x = self.service_samples(service, None, b, b + 1)
        return empirical_quantile(x, p) if x.size else math.nan

    def bucket_e2e_quantile(self, class_id: str, b: int, p: float) -> float:
        x = self.e2e_samples(class_id, b, b + 1)
        return empirical_quantile(x, p) if x.size else math.nan

    def heatmap(self, p: float = 99.0) -> np.ndarray:
        """(buckets x services) matrix of per-bucket response-time percentiles."""
        out = np.full((self.completed_buckets, len(self.services)), np.nan)
        for b in range(self.completed_buckets):
            for i, s in enumerate(self.services):
                out[b, i] = self.service_p99(s, b, p)
        return out

    # -- export ------------------------------------------------------------
    def rows(self):
        """Long-format rows ``(bucket, service, metric, value)``."""
        for b in range(self.completed_buckets):
            for i, s in enumerate(self.services):
                x = self.service_samples(s, None, b, b + 1)
                yield b, s, "replicas", int(self.replicas[b, i])
                yield b, s, "utilization", self.utilization(s, b, b + 1)
                yield b, s, "queue_depth", int(self.queue_depth[b, i])
                yield b, s, "response_p50_ms", empirical_quantile(x, 50) if x.size else math.nan
                yield b, s, "response_p99_ms", empirical_quantile(x, 99) if x.size else math.nan
                for j, c in enumerate(self.classes):
                    if self.visit_arrivals[b, i, j]:
                        yield b, s, f"arrivals:{c}", int(self.visit_arrivals[b, i, j])
            for j, c in enumerate(self.classes):
                x = self.e2e_samples(c, b, b + 1)
                yield b, "e2e", f"arrivals:{c}", int(self.arrivals[b, j])
                yield b, "e2e", f"completions:{c}", int(self.completions[b, j])
                if x.size:
                    yield b, "e2e", f"p99_ms:{c}", empirical_quantile(x, 99)

    def to_csv(self, path_or_buf=None) -> str:
        buf = io.StringIO()
        w = csv.writer(buf)
        w.writerow(["bucket", "service", "metric", "value"])
        for row in self.rows():
            w.writerow(row)
        text = buf.getvalue()
        if path_or_buf is not None:
            with open(path_or_buf, "w", newline="") as fh:
                fh.write(text)
        return text

    def to_json(self) -> dict:
        return {
            "services": self.services,
            "classes": self.classes,
            "bucket_s": self.bucket_s,
            "completed_buckets": self.completed_buckets,
            "in_flight": self.in_flight,
            "rows": [list(r) for r in self.rows()],
        }


class Simulation:
    """One run of the mesh. Use :func:`run_simulation` unless you need the handle."""

    def __init__(self, config: SimConfig, arrivals, throttles: Sequence[ThrottleEvent] = (),
                 controller_hook: Optional[Callable[["Simulation", int], Optional[bool]]] = None):
        config.validate()
        if arrivals.duration_s + 1e-9 < config.duration_s:
            raise ArrivalGapError(
                f"arrival stream covers {arrivals.duration_s}s but the run lasts {config.duration_s}s")
        topo = config.topology
        self.config = config
        self.topology = topo
        self.service_ids = list(topo.nodes)
        self.class_ids = list(topo.classes)
        self._sidx = {s: i for i, s in enumerate(self.service_ids)}
        cidx = {c: i for i, c in enumerate(self.class_ids)}
        for t in throttles:
            if t.service not in self._sidx:
                raise UnknownService(t.service)
        self.throttles = list(throttles)
        self.hook = controller_hook

        self.services = [_Service(i, topo.nodes[s], config.rpc_daemon_pool_per_replica)
                         for i, s in enumerate(self.service_ids)]
        self.tree_svc, self.tree_kind, self.tree_children, self.tree_caller = [], [], [], []
        for c in self.class_ids:
            tree = topo.call_tree(c)
            self.tree_svc.append([self._sidx[v.service] for v in tree])
            self.tree_kind.append([_KIND_CODE[v.kind] for v in tree])
            self.tree_children.append([v.children for v in tree])
            self.tree_caller.append([v.caller for v in tree])
        self.low = [topo.classes[c].priority == "low" for c in self.class_ids]

        ss = np.random.SeedSequence(config.seed)
        pairs = [(s, c) for s in self.service_ids for c in self.class_ids
                 if c in topo.nodes[s].service_time]
        children = ss.spawn(len(pairs))
        self.samplers: Dict[tuple, _Sampler] = {}
        for (s, c), child in zip(pairs, children):
            self.samplers[(self._sidx[s], cidx[c])] = _Sampler(topo.nodes[s].service_time[c], np.random.default_rng(child))

        self.bucket_s = config.telemetry_bucket_s
        self.n_buckets = int(math.ceil(config.duration_s / self.bucket_s - 1e-9))
        self.load_s = config.load_sample_s
        n_load = int(math.ceil(self.n_buckets * self.bucket_s / self.load_s - 1e-9))
        self.telemetry = Telemetry(self.service_ids, self.class_ids, self.n_buckets, self.bucket_s,
                                   self.load_s, n_load)

        self.now = 0.0
        self._heap: list = []
        self._seq = 0
        self._stopped = False
        self._arr_t = np.asarray(arrivals.times, dtype=float)
        self._arr_c = np.asarray([cidx[c] for c in arrivals.class_ids], dtype=np.int64) if len(arrivals) else np.zeros(0, np.int64)
        self._alloc_t = [0.0] * len(self.services)
        for svc in self.services:
            for _ in range(config.allocation[svc.id]):
                r = svc.new_replica()
                svc.active.append(r)
                svc.present.append(r)
        self.telemetry.replicas[0] = [len(s.active) for s in self.services]
        self.in_flight = 0

    # -- public control surface -------------------------------------------
    def apply_allocation(self, service: str, replicas: int) -> bool:
        """Scale ``service`` to ``replicas`` active replicas.

        New replicas take work from the next dispatch on; removed replicas stop
        receiving work and disappear once their in-flight work drains.
        Returns False when the count is unchanged.
        """
        if service not in self._sidx:
            raise UnknownService(service)
        if replicas < max(1, self.config.min_replicas):
            raise ConfigError(f"replica count {replicas} below the minimum")
        svc = self.services[self._sidx[service]]
        cur = len(svc.active)
        if replicas == cur:
            return False
        self._account_alloc(svc)
        if replicas > cur:
            for _ in range(replicas - cur):
                r = svc.new_replica()
                svc.active.append(r)
                svc.present.append(r)
        else:
            for r in svc.active[replicas:]:
                r.draining = True
            svc.active = svc.active[:replicas]
            svc.present = [r for r in svc.present if not (r.draining and r.idle() and not r.queued())]
        svc.rr %= len(svc.active)
        return True

    def replicas(self, service: str) -> int:
        return len(self.services[self._sidx[service]].active)

    def stop(self) -> None:
        self._stopped = True

    # -- internals -----------------------------------------------------------
    def _account_alloc(self, svc: _Service) -> None:
        """Credit allocated core-seconds up to now at the current replica count."""
        t0, t1 = self._alloc_t[svc.idx], self.now
        if t1 > t0:
            self._spread(self.telemetry.alloc, svc.idx, t0, t1, len(svc.present) * svc.cores)
        self._alloc_t[svc.idx] = t1

    def _spread(self, arr: np.ndarray, s: int, t0: float, t1: float, weight: float) -> None:
        bs = self.bucket_s
        nb = self.n_buckets
        b = int(t0 / bs)
        while t0 < t1 and b < nb:
            edge = (b + 1) * bs
            seg = min(t1, edge) - t0
            if seg > 0:
                arr[b, s] += seg * weight
            t0 = edge
            b += 1

    def _push(self, t: float, kind: int, payload) -> None:
        self._seq += 1
        heapq.heappush(self._heap, (t, self._seq, kind, payload))

    def _factor(self, s: int, t: float) -> float:
        f = 1.0
        for th in self.throttles:
            if self._sidx[th.service] == s and th.start_s <= t < th.end_s:
                f = min(f, th.cpu_factor)
        return f

    def _bucket(self, t: float) -> int:
        b = int(t / self.bucket_s)
        return b if b < self.n_buckets else self.n_buckets - 1

    def _arrive(self, task: _Task) -> None:
        svc = self.services[task.svc]
        act = svc.active
        rep = act[svc.rr % len(act)]
        svc.rr = (svc.rr + 1) % len(act)
        task.rep = rep
        task.arrive = self.now
        tel = self.telemetry
        c = task.req.cls
        tel.visit_arrivals[self._bucket(self.now), task.svc, c] += 1
        li = int(self.now / self.load_s)
        if li < tel.load_counts.shape[0]:
            tel.load_counts[li, task.svc, c] += 1
        if rep.threads_free > 0 and not rep.thread_hi and not rep.thread_lo:
            self._start_thread(task)
        elif task.low:
            rep.thread_lo.append(task)
        else:
            rep.thread_hi.append(task)

    def _start_thread(self, task: _Task) -> None:
        rep = task.rep
        rep.threads_free -= 1
        task.thread = True
        task.local += self.now - task.arrive
        if task.mq and self.config.mq_poll_batch > 1:
            self._claim_batch(task)
        self._request_core(task)

    def _claim_batch(self, task: _Task) -> None:
        rep = task.rep
        extra = []
        for q in (rep.thread_hi, rep.thread_lo):
            while q and len(extra) < self.config.mq_poll_batch - 1 and q[0].mq:
                extra.append(q.popleft())
        if extra:
            task.batch = extra

    def _request_core(self, task: _Task) -> None:
        rep = task.rep
        if rep.cores_free > 0:
            self._start_compute(task)
        else:
            task.mark = self.now
            (rep.core_lo if task.low else rep.core_hi).append(task)

    def _start_compute(self, task: _Task) -> None:
        rep = task.rep
        rep.cores_free -= 1
        work = self.samplers[(task.svc, task.req.cls)].draw()
        if self.throttles:
            work /= self._factor(task.svc, self.now)
        task.local += work
        self._spread(self.telemetry.busy, task.svc, self.now, self.now + work, 1.0)
        self._push(self.now + work, 0, task)

    def _compute_done(self, task: _Task) -> None:
        rep = task.rep
        rep.cores_free += 1
        nxt = rep.core_hi.popleft() if rep.core_hi else (rep.core_lo.popleft() if rep.core_lo else None)
        if nxt is not None:
            nxt.local += self.now - nxt.mark
            self._start_compute(nxt)
        self._advance(task)

    def _spawn(self, parent: _Task, k: int, mq: bool) -> None:
        req = parent.req
        child = _Task(req, k, self.tree_svc[req.cls][k], None if mq else parent, self.low[req.cls], mq)
        self._arrive(child)

    def _advance(self, task: _Task) -> None:
        """Issue the next downstream call of ``task`` or finish it."""
        cls = task.req.cls
        children = self.tree_children[cls][task.k]
        kinds = self.tree_kind[cls]
        while task.pos < len(children):
            ck = children[task.pos]
            kind = kinds[ck]
            if kind == 3:
                task.pos += 1
                self._spawn(task, ck, True)
                continue
            if kind == 2 and not task.daemon:
                rep = task.rep
                if rep.daemon_free > 0:
                    rep.daemon_free -= 1
                    task.daemon = True
                    self._release_thread(task)
                else:
                    task.mark = self.now
                    rep.daemon_q.append(task)
                    return
            task.pos += 1
            self._spawn(task, ck, False)
            return
        self._finish(task)

    def _daemon_granted(self, task: _Task) -> None:
        task.local += self.now - task.mark
        task.daemon = True
        self._release_thread(task)
        ck = self.tree_children[task.req.cls][task.k][task.pos]
        task.pos += 1
        self._spawn(task, ck, False)

    def _release_thread(self, task: _Task) -> None:
        rep = task.rep
        task.thread = False
        if task.batch:
            # the worker keeps its thread and moves to the next polled message
            nxt = task.batch.pop(0)
            nxt.batch, task.batch = task.batch, None
            nxt.thread = True
            nxt.local += self.now - nxt.arrive
            self._request_core(nxt)
            return
        rep.threads_free += 1
        if rep.thread_hi:
            self._start_thread(rep.thread_hi.popleft())
        elif rep.thread_lo:
            self._start_thread(rep.thread_lo.popleft())
        elif rep.draining and rep.idle():
            self._retire(task.svc, rep)

    def _release_daemon(self, task: _Task) -> None:
        rep = task.rep
        task.daemon = False
        if rep.daemon_q:
            # the slot passes straight to the next waiting caller
            self._daemon_granted(rep.daemon_q.popleft())
        else:
            rep.daemon_free += 1
            if rep.draining and rep.idle():
                self._retire(task.svc, rep)

    def _retire(self, s: int, rep: _Replica) -> None:
        svc = self.services[s]
        if rep in svc.present:
            self._account_alloc(svc)
            svc.present.remove(rep)

    def _finish(self, task: _Task) -> None:
        now = self.now
        req = task.req
        tel = self.telemetry
        b = self._bucket(now)
        tel._v_bucket.append(b)
        tel._v_svc.append(task.svc)
        tel._v_cls.append(req.cls)
        tel._v_ms.append(task.local * 1000.0)
        tel.visit_completions[b, task.svc, req.cls] += 1
        if task.thread:
            self._release_thread(task)
        if task.daemon:
            self._release_daemon(task)
        req.outstanding -= 1
        if req.outstanding == 0:
            tel._e_bucket.append(b)
            tel._e_cls.append(req.cls)
            tel._e_ms.append((now - req.arrival) * 1000.0)
            tel.completions[b, req.cls] += 1
            self.in_flight -= 1
        parent = task.parent
        if parent is not None:
            self._advance(parent)

    def _close_bucket(self, b: int) -> None:
        tel = self.telemetry
        for svc in self.services:
            self._account_alloc(svc)
            tel.queue_depth[b, svc.idx] = sum(r.queued() for r in svc.present)
        tel._close_bucket(b)
        if self.hook is not None and self.hook(self, b):
            self._stopped = True
        if b + 1 < self.n_buckets:
            tel.replicas[b + 1] = [len(s.active) for s in self.services]

    def run(self) -> Telemetry:
        duration = self.config.duration_s
        times = self._arr_t
        classes = self._arr_c
        n_arr = len(times)
        ai = 0
        heap = self._heap
        next_boundary = self.bucket_s
        bucket = 0
        tel = self.telemetry
        while not self._stopped:
            t_arr = times[ai] if ai < n_arr else math.inf
            t_ev = heap[0][0] if heap else math.inf
            t_next = min(t_arr, t_ev)
            if next_boundary <= t_next or t_next >= duration:
                # bucket boundary first: events at exactly the boundary belong to the next bucket
                if bucket >= self.n_buckets:
                    break
                self.now = min(next_boundary, duration)
                self._close_bucket(bucket)
                bucket += 1
                next_boundary = (bucket + 1) * self.bucket_s
                if bucket >= self.n_buckets:
                    break
                continue
            self.now = t_next
            if t_arr <= t_ev:
                c = int(classes[ai])
                ai += 1
                tree = self.tree_svc[c]
                req = _Request(c, t_arr, len(tree))
                tel.arrivals[self._bucket(t_arr), c] += 1
                self.in_flight += 1
                root = _Task(req, 0, tree[0], None, self.low[c], False)
                self._arrive(root)
            else:
                _, _, kind, task = heapq.heappop(heap)
                self._compute_done(task)
        tel.end_s = self.now
        tel.in_flight = self.in_flight
        return tel


def run_simulation(config: SimConfig, arrivals, throttles: Sequence[ThrottleEvent] = (),
                   controller_hook: Optional[Callable[[Simulation, int], Optional[bool]]] = None) -> Telemetry:
    """Simulate ``config`` under ``arrivals`` and return its telemetry.

    ``controller_hook(sim, bucket)`` runs synchronously after every completed
    bucket; it may call ``sim.apply_allocation`` and returns True to stop.
    """
    return Simulation(config, arrivals, throttles, controller_hook).run()


def apply_allocation(sim: Simulation, service: str, replicas: int) -> bool:
    return sim.apply_allocation(service, replicas)


def measure_utilization(telemetry: Telemetry, service: str, window: Sequence[int]) -> float:
    """Busy core-time over allocated core-time for buckets ``window = (b0, b1)``."""
    if service not in telemetry.services:
        raise UnknownService(service)
    b0, b1 = window
    return telemetry.utilization(service, b0, b1)
