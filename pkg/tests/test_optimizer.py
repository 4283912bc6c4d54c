import itertools

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from meshsla.errors import GridMismatch, Infeasible, InstanceTooLarge, ZeroMeasuredLatency
from meshsla.model import QuantileTable, SlaTarget
from meshsla.optimizer import (
    ClassInputs,
    OptimizerInputs,
    ServiceInputs,
    brute_force_allocation,
    calibrate_overestimation,
    check_decomposition,
    solve_allocation,
    tightest_upper_bound,
)

GRID = (50.0, 90.0, 95.0, 99.0, 99.5, 99.9)


def inputs(grid, services, classes):
    """services: name -> (R, {class: D}); classes: id -> (chain, percentile, T, alpha)."""
    svc = {s: ServiceInputs(s, {c: np.asarray(d, float) for c, d in D.items()}, np.asarray(R, float),
                            [{} for _ in R]) for s, (R, D) in services.items()}
    cls = {c: ClassInputs(c, tuple(chain), SlaTarget(x, T), a) for c, (chain, x, T, a) in classes.items()}
    return OptimizerInputs(grid, svc, cls)


def enumerate_bound(inp, delta, cid):
    c = inp.classes[cid]
    best = np.inf
    items = [(s, k) for s, k in c.chain]
    for gam in itertools.product(range(len(inp.grid)), repeat=len(items)):
        used = sum(k * (100 - inp.grid[g]) for (s, k), g in zip(items, gam))
        if used <= 100 - c.sla.percentile + 1e-9:
            best = min(best, sum(k * inp.services[s].D[cid][delta[s], g] for (s, k), g in zip(items, gam)))
    return best


def test_decomposition_examples():
    assert check_decomposition(99, (99.5, 99.5))
    assert check_decomposition(99, (99.1, 99.9))
    assert not check_decomposition(99, (99.0, 99.9))


def test_two_service_bound_example():
    inp = inputs((99.0, 99.5, 99.9),
                 {"a": ([1], {"q": [[10, 12, 20]]}), "b": ([1], {"q": [[8, 9, 15]]})},
                 {"q": ((("a", 1), ("b", 1)), 99, 100, 1.0)})
    r = tightest_upper_bound({"a": 0, "b": 0}, inp, "q")
    assert r.bound_ms == 21
    assert r.percentiles == {"a": 99.5, "b": 99.5}


def test_single_service_takes_sla_percentile():
    row = [1, 2, 3, 4, 5, 6]
    inp = inputs(GRID, {"a": ([1], {"q": [row]})}, {"q": ((("a", 1),), 99, 100, 1.0)})
    assert tightest_upper_bound({"a": 0}, inp, "q").bound_ms == row[GRID.index(99.0)]


def random_instance(rng, n, m, h, c, mult=1):
    grid = GRID[-h:] if h <= len(GRID) else GRID
    names = [f"s{i}" for i in range(n)]
    cls = {}
    for j in range(c):
        chain = tuple((s, int(rng.integers(1, mult + 1))) for s in names if rng.random() < 0.7) or ((names[0], 1),)
        cls[f"c{j}"] = (chain, 99.0, float(rng.uniform(20, 80)) * len(chain), 1.0)
    services = {}
    for s in names:
        R = np.sort(rng.uniform(1, 10, m))[::-1].round(1)
        D = {}
        for j in range(c):
            base = np.sort(rng.uniform(1, 10, (m, len(grid))), axis=1)
            D[f"c{j}"] = base * np.linspace(1, 3, m)[:, None]
        services[s] = (R, D)
    return inputs(grid, services, cls)


@pytest.mark.parametrize("seed", range(100))
def test_dp_equals_enumeration(seed):
    rng = np.random.default_rng(seed)
    inp = random_instance(rng, 4, 1, 5, 1)
    delta = {s: 0 for s in inp.services}
    got = tightest_upper_bound(delta, inp, "c0").bound_ms
    assert got == pytest.approx(enumerate_bound(inp, delta, "c0"), abs=1e-9)


@pytest.mark.parametrize("seed", range(60))
def test_branch_and_bound_matches_brute_force(seed):
    rng = np.random.default_rng(1000 + seed)
    inp = random_instance(rng, int(rng.integers(1, 5)), int(rng.integers(1, 6)), 6, int(rng.integers(1, 3)), 2)
    try:
        ref = brute_force_allocation(inp)
    except Infeasible:
        with pytest.raises(Infeasible):
            solve_allocation(inp)
        return
    got = solve_allocation(inp)
    assert got.total_cost == pytest.approx(ref.total_cost, abs=1e-9)
    assert got.choices == ref.choices


def test_picks_cheapest_feasible_row():
    D = [[50, 60, 70, 80, 90, 200], [5, 6, 7, 8, 9, 10], [1, 2, 3, 4, 5, 6]]
    # rows ordered by increasing cost; row 0 violates, so row 1 is cheapest feasible
    inp = inputs(GRID, {"a": ([2, 4, 6], {"q": D})}, {"q": ((("a", 1),), 99, 20, 1.0)})
    plan = solve_allocation(inp)
    assert plan.choices == {"a": 1} and plan.total_cost == 4


def test_two_by_three_matches_exhaustive():
    rng = np.random.default_rng(7)
    inp = random_instance(rng, 2, 3, 6, 1)
    best = min(
        (sum(inp.services[s].R[i] for s, i in zip(inp.services, d)), d)
        for d in itertools.product(range(3), repeat=2)
        if all(enumerate_bound(inp, dict(zip(inp.services, d)), c) <= inp.classes[c].target_ms
               for c in inp.classes)
    )
    assert solve_allocation(inp).total_cost == pytest.approx(best[0])


def test_infeasible_names_blocking_class():
    inp = inputs(GRID, {"a": ([1, 2], {"q": [[5] * 6, [4] * 6]})}, {"q": ((("a", 1),), 99, 1, 1.0)})
    with pytest.raises(Infeasible) as e:
        solve_allocation(inp)
    assert e.value.class_id == "q"
    with pytest.raises(Infeasible):
        brute_force_allocation(inp)


def test_single_row_instance():
    inp = inputs(GRID, {"a": ([3], {"q": [[1] * 6]}), "b": ([2], {"q": [[1] * 6]})},
                 {"q": ((("a", 1), ("b", 1)), 99, 10, 1.0)})
    assert brute_force_allocation(inp).choices == {"a": 0, "b": 0}


def test_brute_force_guard():
    services = {f"s{i}": ([1.0] * 40, {"q": [[1] * 6] * 40}) for i in range(4)}
    inp = inputs(GRID, services, {"q": (tuple((s, 1) for s in services), 90, 100, 1.0)})
    with pytest.raises(InstanceTooLarge):
        brute_force_allocation(inp)


def test_chain_multiplicity_counts_twice():
    inp = inputs((99.0, 99.5, 99.9), {"a": ([1], {"q": [[10, 12, 20]]})}, {"q": ((("a", 2),), 99, 100, 1.0)})
    # two visits, each at 99.5, use the full budget
    assert tightest_upper_bound({"a": 0}, inp, "q").bound_ms == 24


def test_grid_must_fit_budget_scale():
    with pytest.raises(GridMismatch):
        inputs((99.95,), {"a": ([1], {"q": [[1]]})}, {"q": ((("a", 1),), 99, 10, 1.0)})


def test_overestimation_relaxes_target():
    D = [[5] * 6, [12] * 6]
    base = inputs(GRID, {"a": ([4, 2], {"q": D})}, {"q": ((("a", 1),), 99, 10, 1.0)})
    relaxed = inputs(GRID, {"a": ([4, 2], {"q": D})}, {"q": ((("a", 1),), 99, 10, 1.3)})
    assert solve_allocation(base).choices == {"a": 0}
    assert solve_allocation(relaxed).choices == {"a": 1}


def calib_inputs(bound):
    return inputs((99.0, 99.5, 99.9), {"a": ([1], {"q": [[bound] * 3]})}, {"q": ((("a", 1),), 99, 500, 1.0)})


def test_calibration_ratio_and_mean():
    inp = calib_inputs(210)
    measured = {"q": QuantileTable((99.0, 99.5, 99.9), (200.0, 200.0, 200.0))}
    assert calibrate_overestimation([({"a": 0}, measured)], inp)["q"] == pytest.approx(1.05)
    inp2 = inputs((99.0, 99.5, 99.9), {"a": ([1, 1], {"q": [[100] * 3, [110] * 3]})},
                  {"q": ((("a", 1),), 99, 500, 1.0)})
    m = {"q": QuantileTable((99.0, 99.5, 99.9), (100.0, 100.0, 100.0))}
    e = calibrate_overestimation([({"a": 0}, m), ({"a": 1}, m)], inp2)
    assert e["q"] == pytest.approx(1.05)


def test_calibration_rejects_zero_latency():
    m = {"q": QuantileTable((99.0, 99.5, 99.9), (0.0, 0.0, 0.0))}
    with pytest.raises(ZeroMeasuredLatency):
        calibrate_overestimation([({"a": 0}, m)], calib_inputs(10))


@settings(max_examples=60, deadline=None)
@given(st.integers(0, 10_000), st.floats(0.1, 50.0))
def test_argmin_invariant_under_common_scaling(seed, k):
    rng = np.random.default_rng(seed)
    inp = random_instance(rng, 3, 3, 6, 1)
    scaled = OptimizerInputs(
        inp.grid,
        {s: ServiceInputs(s, {c: d * k for c, d in v.D.items()}, v.R, v.Y) for s, v in inp.services.items()},
        {c: ClassInputs(c, v.chain, SlaTarget(v.sla.percentile, v.sla.latency_ms * k), 1.0)
         for c, v in inp.classes.items()},
    )
    try:
        a = solve_allocation(inp).choices
    except Infeasible:
        with pytest.raises(Infeasible):
            solve_allocation(scaled)
        return
    assert solve_allocation(scaled).choices == a


@settings(max_examples=60, deadline=None)
@given(st.integers(0, 10_000))
def test_bound_monotone_in_budget_and_entries(seed):
    rng = np.random.default_rng(seed)
    inp = random_instance(rng, 3, 1, 6, 1)
    delta = {s: 0 for s in inp.services}
    b99 = tightest_upper_bound(delta, inp, "c0").bound_ms
    loose = OptimizerInputs(inp.grid, inp.services,
                            {"c0": ClassInputs("c0", inp.classes["c0"].chain, SlaTarget(95, 1), 1.0)})
    assert tightest_upper_bound(delta, loose, "c0").bound_ms <= b99 + 1e-9
    bumped = {s: ServiceInputs(s, {c: d + 1.0 for c, d in v.D.items()}, v.R, v.Y) for s, v in inp.services.items()}
    assert tightest_upper_bound(delta, OptimizerInputs(inp.grid, bumped, inp.classes), "c0").bound_ms >= b99
