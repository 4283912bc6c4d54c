"""Exact solvers for SLA-constrained load-per-replica selection.

Two problems are solved here without an external MIP solver:

* the tightest latency bound of one class for a fixed choice of rows, a
  multiple-choice knapsack over an integerized percentile-residual budget
  (dynamic programming, :func:`tightest_upper_bound`);
* the minimum-cost choice of one row per service such that every class's
  tightest bound stays below its (scaled) SLA target (depth-first
  branch-and-bound, :func:`solve_allocation`).

:func:`brute_force_allocation` enumerates every row combination and is the
oracle the branch-and-bound is checked against.
"""
from __future__ import annotations

import itertools
import math
import time
from dataclasses import dataclass, field
from typing import Dict, List, Mapping, Optional, Sequence, Tuple

import numpy as np

from .errors import (
    EmptyProfile,
    GridMismatch,
    Infeasible,
    InfeasibleBudget,
    InstanceTooLarge,
    ZeroMeasuredLatency,
)
from .model import LoadVector, QuantileTable, SlaTarget
from .stats import nearest_rank

DEFAULT_BUDGET_SCALE = 10
BRUTE_FORCE_LIMIT = 10**6
_REL_TOL = 1e-9


def check_decomposition(x_e: float, chosen: Sequence[float]) -> bool:
    """True when per-service percentiles ``chosen`` fit the residual of ``x_e``."""
    return sum(100.0 - x for x in chosen) <= 100.0 - x_e + 1e-9


@dataclass
class ServiceInputs:
    service: str
    D: Dict[str, np.ndarray]  # class id -> (m, h) latency matrix in ms
    R: np.ndarray  # (m,) cores per row
    Y: List[LoadVector]

    @property
    def m(self) -> int:
        return len(self.R)


@dataclass
class ClassInputs:
    id: str
    chain: Tuple[Tuple[str, int], ...]
    sla: SlaTarget
    overestimation: float = 1.0

    @property
    def target_ms(self) -> float:
        return self.overestimation * self.sla.latency_ms


@dataclass
class OptimizerInputs:
    grid: Tuple[float, ...]
    services: Dict[str, ServiceInputs]
    classes: Dict[str, ClassInputs]
    budget_scale: int = DEFAULT_BUDGET_SCALE

    def __post_init__(self):
        self.grid = tuple(float(p) for p in self.grid)
        self.validate()

    def validate(self) -> None:
        scale = self.budget_scale
        for p in self.grid:
            if not 0 < p <= 100:
                raise GridMismatch(f"grid percentile {p} outside (0, 100]")
            if abs((100 - p) * scale - round((100 - p) * scale)) > 1e-6:
                raise GridMismatch(f"grid percentile {p} is not representable at budget scale {scale}")
        h = len(self.grid)
        for s in self.services.values():
            if s.m == 0:
                raise EmptyProfile(f"service {s.service!r} has no rows")
            if np.any(s.R <= 0):
                raise GridMismatch(f"service {s.service!r} has non-positive costs")
            for cid, d in s.D.items():
                if d.shape != (s.m, h):
                    raise GridMismatch(f"{s.service}/{cid}: D has shape {d.shape}, expected {(s.m, h)}")
                if np.any(np.diff(d, axis=1) < 0):
                    raise GridMismatch(f"{s.service}/{cid}: latency rows are not monotone in percentile")
        for c in self.classes.values():
            x = c.sla.percentile
            if not 100 - x > 0:
                raise GridMismatch(f"class {c.id!r}: no residual budget")
            if abs((100 - x) * scale - round((100 - x) * scale)) > 1e-6:
                raise GridMismatch(f"class {c.id!r}: percentile {x} not representable at scale {scale}")
            for svc, _ in c.chain:
                if svc not in self.services:
                    raise GridMismatch(f"class {c.id!r} uses service {svc!r} with no inputs")
                if c.id not in self.services[svc].D:
                    raise GridMismatch(f"service {svc!r} has no latency matrix for class {c.id!r}")

    @property
    def residual_units(self) -> np.ndarray:
        return np.array([round((100 - p) * self.budget_scale) for p in self.grid], dtype=np.int64)

    def budget_units(self, class_id: str) -> int:
        return round((100 - self.classes[class_id].sla.percentile) * self.budget_scale)

    def with_overestimation(self, ratios: Mapping[str, float]) -> "OptimizerInputs":
        classes = {
            cid: ClassInputs(c.id, c.chain, c.sla, float(ratios.get(cid, c.overestimation)))
            for cid, c in self.classes.items()
        }
        return OptimizerInputs(self.grid, self.services, classes, self.budget_scale)


@dataclass(frozen=True)
class BoundResult:
    class_id: str
    bound_ms: float
    percentiles: Dict[str, float]  # service -> chosen percentile


@dataclass
class AllocationPlan:
    choices: Dict[str, int]
    lpr: Dict[str, LoadVector]
    total_cost: float
    bounds: Dict[str, BoundResult]
    solve_log: Dict[str, float] = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "choices": dict(self.choices),
            "lpr": {s: dict(v) for s, v in self.lpr.items()},
            "total_cost": self.total_cost,
            "bounds": {
                cid: {"bound_ms": b.bound_ms, "percentiles": dict(b.percentiles)}
                for cid, b in self.bounds.items()
            },
            "solve_log": dict(self.solve_log),
        }

    @classmethod
    def from_dict(cls, d: Mapping) -> "AllocationPlan":
        return cls(
            choices={k: int(v) for k, v in d["choices"].items()},
            lpr={s: {k: float(x) for k, x in v.items()} for s, v in d["lpr"].items()},
            total_cost=float(d["total_cost"]),
            bounds={
                cid: BoundResult(cid, float(b["bound_ms"]), {k: float(p) for k, p in b["percentiles"].items()})
                for cid, b in d.get("bounds", {}).items()
            },
            solve_log=dict(d.get("solve_log", {})),
        )


def _min_bound(values: Sequence[np.ndarray], costs: Sequence[np.ndarray], budget: int,
               track: bool = False):
    """Multiple-choice knapsack: choose one column per item, minimise value.

    ``f[b]`` holds the smallest value achievable with total cost at most ``b``.
    Returns ``(best, choices)``; ``best`` is ``inf`` when nothing fits.
    """
    f = np.zeros(budget + 1)
    picks = []
    for v, c in zip(values, costs):
        g = np.full(budget + 1, np.inf)
        arg = np.full(budget + 1, -1, dtype=np.int64) if track else None
        for col in range(len(v)):
            cost = int(c[col])
            if cost > budget:
                continue
            cand = f[: budget + 1 - cost] + v[col]
            tail = g[cost:]
            if track:
                better = cand < tail
                arg[cost:][better] = col
            np.minimum(tail, cand, out=tail)
        f = g
        if track:
            picks.append(arg)
    best = float(f[budget])
    if not track or not math.isfinite(best):
        return best, None
    cols = [0] * len(values)
    b = budget
    for i in range(len(values) - 1, -1, -1):
        # picks[i][b] is the column that produced f_i[b]
        col = int(picks[i][b])
        cols[i] = col
        b -= int(costs[i][col])
    return best, cols


def _class_terms(inputs: OptimizerInputs, class_id: str, rows: Mapping[str, np.ndarray]):
    units = inputs.residual_units
    values, costs, services = [], [], []
    for svc, mult in inputs.classes[class_id].chain:
        values.append(mult * rows[svc])
        costs.append(mult * units)
        services.append(svc)
    return values, costs, services


def tightest_upper_bound(fixed: Mapping[str, int], inputs: OptimizerInputs, class_id: str) -> BoundResult:
    """Smallest sum of per-service quantiles whose residuals fit the class budget."""
    rows = {svc: inputs.services[svc].D[class_id][fixed[svc]] for svc, _ in inputs.classes[class_id].chain}
    values, costs, services = _class_terms(inputs, class_id, rows)
    budget = inputs.budget_units(class_id)
    best, cols = _min_bound(values, costs, budget, track=True)
    if not math.isfinite(best):
        raise InfeasibleBudget(f"class {class_id!r}: no percentile combination fits the residual budget")
    pct = {svc: inputs.grid[col] for svc, col in zip(services, cols)}
    return BoundResult(class_id, best, pct)


def _bound_value(inputs: OptimizerInputs, class_id: str, rows: Mapping[str, np.ndarray]) -> float:
    values, costs, _ = _class_terms(inputs, class_id, rows)
    best, _ = _min_bound(values, costs, inputs.budget_units(class_id))
    return best


def _fits(bound: float, target: float) -> bool:
    return bound <= target * (1 + _REL_TOL)


def _same_cost(a: float, b: float) -> bool:
    return abs(a - b) <= _REL_TOL * max(1.0, abs(a), abs(b))


def _plan(inputs: OptimizerInputs, delta: Mapping[str, int], log: Dict[str, float]) -> AllocationPlan:
    cost = float(sum(inputs.services[s].R[i] for s, i in delta.items()))
    bounds = {cid: tightest_upper_bound(delta, inputs, cid) for cid in inputs.classes}
    lpr = {s: dict(inputs.services[s].Y[i]) for s, i in delta.items()}
    return AllocationPlan(dict(delta), lpr, cost, bounds, log)


def solve_allocation(inputs: OptimizerInputs) -> AllocationPlan:
    """Minimum-cost row per service meeting every class's SLA.

    Depth-first branch-and-bound. Services are branched in decreasing order of
    cost spread and rows in increasing cost. A node is cut when its partial
    cost plus the cheapest remaining rows exceeds the incumbent, or when some
    class cannot meet its target even if every unassigned service takes its
    per-percentile fastest latencies. Equal-cost optima resolve to the
    lexicographically smallest row vector in ``inputs.services`` order.
    """
    if not inputs.classes:
        raise EmptyProfile("no request classes to optimise for")
    t0 = time.perf_counter()
    names = list(inputs.services)
    order = sorted(names, key=lambda s: (-(float(inputs.services[s].R.max() - inputs.services[s].R.min())), names.index(s)))
    fastest = {s: {cid: d.min(axis=0) for cid, d in inputs.services[s].D.items()} for s in names}
    min_cost = [float(inputs.services[s].R.min()) for s in order]
    rest_min = [sum(min_cost[k:]) for k in range(len(order) + 1)]
    classes_of = {s: [cid for cid, c in inputs.classes.items() if any(svc == s for svc, _ in c.chain)] for s in names}
    row_order = {s: sorted(range(inputs.services[s].m), key=lambda i: (float(inputs.services[s].R[i]), i)) for s in names}

    stats = {"nodes": 0, "pruned_cost": 0, "pruned_feasibility": 0}
    blocked: Dict[str, int] = {cid: 0 for cid in inputs.classes}

    # root feasibility: even the fastest latencies must fit
    for cid in inputs.classes:
        rows = {svc: fastest[svc][cid] for svc, _ in inputs.classes[cid].chain}
        b = _bound_value(inputs, cid, rows)
        if not _fits(b, inputs.classes[cid].target_ms):
            raise Infeasible(
                f"class {cid!r} cannot meet its SLA even at the fastest profiled rows",
                class_id=cid, gap_ms=b - inputs.classes[cid].target_ms,
            )

    best_cost = math.inf
    best_key: Optional[Tuple[int, ...]] = None
    assigned: Dict[str, int] = {}

    def current(cid: str) -> Dict[str, np.ndarray]:
        return {
            svc: inputs.services[svc].D[cid][assigned[svc]] if svc in assigned else fastest[svc][cid]
            for svc, _ in inputs.classes[cid].chain
        }

    def dfs(depth: int, cost: float) -> None:
        nonlocal best_cost, best_key
        stats["nodes"] += 1
        if depth == len(order):
            key = tuple(assigned[s] for s in names)
            if cost < best_cost and not _same_cost(cost, best_cost) or (
                _same_cost(cost, best_cost) and (best_key is None or key < best_key)
            ):
                best_cost, best_key = cost, key
            return
        svc = order[depth]
        for i in row_order[svc]:
            c = cost + float(inputs.services[svc].R[i])
            lb = c + rest_min[depth + 1]
            if lb > best_cost and not _same_cost(lb, best_cost):
                stats["pruned_cost"] += 1
                # rows are sorted by cost, later ones are no cheaper
                break
            assigned[svc] = i
            ok = True
            for cid in classes_of[svc]:
                if not _fits(_bound_value(inputs, cid, current(cid)), inputs.classes[cid].target_ms):
                    ok = False
                    blocked[cid] += 1
                    break
            if ok:
                dfs(depth + 1, c)
            else:
                stats["pruned_feasibility"] += 1
            del assigned[svc]

    dfs(0, 0.0)
    if best_key is None:
        cid = max(blocked, key=lambda k: blocked[k])
        raise Infeasible(f"no row combination meets every SLA; class {cid!r} blocks most often", class_id=cid)
    log = dict(stats)
    log["wall_time_s"] = time.perf_counter() - t0
    return _plan(inputs, dict(zip(names, best_key)), log)


def brute_force_allocation(inputs: OptimizerInputs) -> AllocationPlan:
    """Exhaustive reference solver with the same contract as :func:`solve_allocation`."""
    if not inputs.classes:
        raise EmptyProfile("no request classes to optimise for")
    names = list(inputs.services)
    size = math.prod(inputs.services[s].m for s in names)
    if size > BRUTE_FORCE_LIMIT:
        raise InstanceTooLarge(f"{size} combinations exceed the brute-force limit {BRUTE_FORCE_LIMIT}")
    t0 = time.perf_counter()
    best_cost, best = math.inf, None
    worst_gap: Dict[str, float] = {}
    for combo in itertools.product(*(range(inputs.services[s].m) for s in names)):
        cost = float(sum(inputs.services[s].R[i] for s, i in zip(names, combo)))
        if best is not None and (not cost < best_cost or _same_cost(cost, best_cost)):
            continue
        delta = dict(zip(names, combo))
        ok = True
        for cid, c in inputs.classes.items():
            try:
                b = tightest_upper_bound(delta, inputs, cid).bound_ms
            except InfeasibleBudget:
                b = math.inf
            if not _fits(b, c.target_ms):
                worst_gap[cid] = min(worst_gap.get(cid, math.inf), b - c.target_ms)
                ok = False
                break
        if ok:
            best_cost, best = cost, delta
    if best is None:
        cid = max(worst_gap, key=lambda k: worst_gap[k]) if worst_gap else next(iter(inputs.classes))
        raise Infeasible("no row combination meets every SLA", class_id=cid, gap_ms=worst_gap.get(cid))
    return _plan(inputs, best, {"nodes": size, "wall_time_s": time.perf_counter() - t0})


def calibrate_overestimation(
    history: Sequence[Tuple[Mapping[str, int], Mapping[str, QuantileTable]]],
    inputs: OptimizerInputs,
    method: str = "mean",
    q: float = 50.0,
    clamp_at_one: bool = False,
) -> Dict[str, float]:
    """Per-class expected ratio of the tightest bound to the measured latency.

    ``history`` holds ``(row choice, measured end-to-end tables per class)``
    pairs. ``method`` is ``"mean"`` or ``"percentile"`` (nearest-rank ``q``-th
    percentile of the observed ratios).
    """
    if not history:
        raise ValueError("calibration needs at least one history entry")
    ratios: Dict[str, List[float]] = {cid: [] for cid in inputs.classes}
    for delta, measured in history:
        for cid, c in inputs.classes.items():
            if cid not in measured:
                continue
            m = measured[cid].at(c.sla.percentile)
            if m <= 0:
                raise ZeroMeasuredLatency(f"class {cid!r} has non-positive measured latency")
            ratios[cid].append(tightest_upper_bound(delta, inputs, cid).bound_ms / m)
    out = {}
    for cid, r in ratios.items():
        if not r:
            continue
        if method == "mean":
            e = float(np.mean(r))
        elif method == "percentile":
            e = float(np.sort(r)[nearest_rank(q, len(r)) - 1])
        else:
            raise ValueError(f"unknown calibration method {method!r}")
        out[cid] = max(e, 1.0) if clamp_at_one else e
    return out
