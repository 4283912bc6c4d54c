import numpy as np
import pytest

from meshsla.errors import GridMismatch, MissingProfile, NoFeasibleRow
from meshsla.exploration import (
    TERM_BACKPRESSURE,
    TERM_EXHAUSTED,
    TERM_SLA,
    ExplorationConfig,
    assemble_model_inputs,
    calibration_history,
    check_grid,
    empty_store,
    explore_service,
    load_store,
    save_store,
    store_profiles,
    update_store,
)
from meshsla.model import LprProfile, ProfileRow, QuantileTable, build_topology
from meshsla.workload import LoadPattern

GRID = (50.0, 90.0, 95.0, 99.0, 99.5, 99.9)


def one_service(sla_ms):
    return build_topology({
        "services": [{"id": "s", "worker_threads_per_replica": 1,
                      "service_time": {"q": {"kind": "exponential", "mean_ms": 10}}}],
        "edges": [],
        "classes": [{"id": "q", "path": ["s"], "sla": {"percentile": 99, "latency_ms": sla_ms}}]})


LOAD = LoadPattern("constant", 250, {"q": 1})


def run(sla_ms, bp, initial=6, load=LOAD):
    cfg = ExplorationConfig(initial_replicas=initial, backpressure_threshold=bp, profiling_time_s=30, seed=1)
    return explore_service("s", one_service(sla_ms), load, cfg, GRID)


def test_sla_violation_stops_at_three_replicas():
    # per-bucket p99 stays under 111 ms at four replicas and above 145 ms at three
    rec = run(sla_ms=125, bp=0.95)
    prof = rec.profile
    assert [r.replicas for r in prof.rows] == [6, 5, 4]
    assert prof.samples_consumed == 30
    assert prof.termination == TERM_SLA
    assert rec.iterations[-1]["replicas"] == 3 and not rec.iterations[-1]["recorded"]
    assert rec.buckets_run == 40


def test_backpressure_guard_stops_at_four_replicas():
    # utilization is about 0.42, 0.50 and 0.63 at six, five and four replicas
    prof = run(sla_ms=10_000, bp=0.6).profile
    assert [r.replicas for r in prof.rows] == [6, 5]
    assert prof.termination == TERM_BACKPRESSURE


def test_exhausts_when_nothing_trips():
    prof = run(sla_ms=10_000, bp=0.95, initial=2, load=LoadPattern("constant", 40, {"q": 1})).profile
    assert prof.termination == TERM_EXHAUSTED
    assert [r.replicas for r in prof.rows] == [2, 1]


def test_initial_violation_has_no_feasible_row():
    with pytest.raises(NoFeasibleRow):
        run(sla_ms=5, bp=0.95)


def test_row_invariants():
    rec = run(sla_ms=125, bp=0.95)
    cfg_spi = 10
    rows = rec.profile.rows
    assert rec.profile.samples_consumed <= cfg_spi * 6
    lpr = [r.lpr["q"] for r in rows]
    assert all(b > a for a, b in zip(lpr, lpr[1:]))
    for it in rec.iterations:
        if it["recorded"]:
            assert it["f_sla"] < 0.10 and it["utilization"] < 0.95
    for r in rows:
        assert r.quantiles["q"].monotone
        assert r.cpu_cost == pytest.approx(np.ceil(250 / r.lpr["q"] - 1e-9), abs=1)
        assert np.mean(r.load_samples["q"]) == pytest.approx(r.lpr["q"], rel=1e-9)


def table(values):
    return QuantileTable(GRID[: len(values)], tuple(values))


def profile(service, rows):
    return LprProfile(service, [ProfileRow(lpr, q, cost, 0.3) for lpr, q, cost in rows], 0.6)


def chain_topology(classes):
    return build_topology({
        "services": [{"id": "a", "service_time": {c: {"kind": "deterministic", "mean_ms": 1} for c in classes}}],
        "edges": [],
        "classes": [{"id": c, "path": ["a"], "sla": {"percentile": 90, "latency_ms": 50}} for c in classes]})


def test_assemble_shapes():
    grid = GRID[:3]
    topo = chain_topology(["q"])
    prof = profile("a", [({"q": 5.0}, {"q": table([1, 2, 3])}, 4.0), ({"q": 8.0}, {"q": table([2, 3, 4])}, 2.0)])
    inp = assemble_model_inputs({"a": prof}, grid, topo)
    assert inp.services["a"].D["q"].shape == (2, 3)
    assert list(inp.services["a"].R) == [4.0, 2.0]


def test_two_classes_share_rows():
    grid = GRID[:3]
    topo = chain_topology(["p", "q"])
    rows = [({"p": 1.0, "q": 2.0}, {"p": table([1, 2, 3]), "q": table([4, 5, 6])}, 3.0)]
    inp = assemble_model_inputs({"a": profile("a", rows)}, grid, topo)
    assert set(inp.services["a"].D) == {"p", "q"}
    assert inp.services["a"].D["p"].shape == inp.services["a"].D["q"].shape == (1, 3)


def test_non_monotone_row_rejected():
    grid = GRID[:3]
    prof = profile("a", [({"q": 5.0}, {"q": table([3, 2, 4])}, 4.0)])
    with pytest.raises(GridMismatch):
        assemble_model_inputs({"a": prof}, grid, chain_topology(["q"]))


def test_missing_profile_and_grid_mismatch():
    topo = chain_topology(["q"])
    with pytest.raises(MissingProfile):
        assemble_model_inputs({}, GRID[:3], topo)
    prof = profile("a", [({"q": 5.0}, {"q": table([1, 2, 3])}, 4.0)])
    with pytest.raises(GridMismatch):
        assemble_model_inputs({"a": prof}, GRID[:4], topo)
    with pytest.raises(GridMismatch):
        check_grid((99, 90))


def test_load_recosts_rows():
    topo = chain_topology(["q"])
    prof = profile("a", [({"q": 5.0}, {"q": table([1, 2, 3])}, 4.0)])
    inp = assemble_model_inputs({"a": prof}, GRID[:3], topo, load={"a": {"q": 42.0}})
    assert inp.services["a"].R[0] == 9.0


def test_store_round_trip_touches_one_entry(tmp_path):
    a = run(sla_ms=125, bp=0.95)
    store = update_store(empty_store(GRID), a)
    other = {"service": "other", "backpressure_threshold": 0.5, "rows": []}
    store["profiles"]["other"] = other
    path = tmp_path / "store.json"
    save_store(str(path), store)
    back = load_store(str(path))
    assert back["profiles"]["other"] == other
    assert store_profiles(back)["s"].samples_consumed == 30
    b = run(sla_ms=10_000, bp=0.6)
    update_store(back, b)
    assert back["profiles"]["other"] == other
    assert len(back["snapshots"]) == len(b.snapshots)


def test_calibration_history_rows():
    rec = run(sla_ms=125, bp=0.95)
    hist = calibration_history(rec.snapshots, ["s", "t"])
    assert [d["s"] for d, _ in hist] == [0, 1, 2]
    assert all(d["t"] == 0 for d, _ in hist)
    assert all("q" in m for _, m in hist)
