import numpy as np
import pytest

from meshsla.errors import ArrivalGapError, ConfigError, EmptyWindow, UnknownService
from meshsla.model import build_topology
from meshsla.simulator import (
    SimConfig,
    Simulation,
    ThrottleEvent,
    apply_allocation,
    measure_utilization,
    run_simulation,
)
from meshsla.workload import LoadPattern, make_stream, replay_trace


def single(ms=10.0, kind="deterministic", threads=1, cores=1, classes=("q",), priority=None):
    cls = []
    for c in classes:
        d = {"id": c, "path": ["s"], "sla": {"percentile": 99, "latency_ms": 100}}
        if priority:
            d["priority"] = priority[c]
        cls.append(d)
    return build_topology({
        "services": [{"id": "s", "cpu_per_replica": cores, "worker_threads_per_replica": threads,
                      "service_time": {c: {"kind": kind, "mean_ms": ms} for c in classes}}],
        "edges": [], "classes": cls})


def chain(kind, n=3, ms=2.0):
    ids = [f"t{i}" for i in range(n)]
    return build_topology({
        "services": [{"id": s, "worker_threads_per_replica": 4,
                      "service_time": {"q": {"kind": "exponential", "mean_ms": ms}}} for s in ids],
        "edges": [{"parent": a, "child": b, "kind": kind} for a, b in zip(ids, ids[1:])],
        "classes": [{"id": "q", "path": ids, "sla": {"percentile": 99, "latency_ms": 100}}]})


def stream(rps, duration, seed=0, mix=None):
    return make_stream(LoadPattern("constant", rps, mix or {"q": 1}), duration, seed)


def test_idle_service_has_zero_utilization():
    tel = run_simulation(SimConfig(single(), {"s": 1}, 120), replay_trace([], duration_s=120))
    assert measure_utilization(tel, "s", (0, 2)) == 0.0
    assert tel.completed_buckets == 2


@pytest.mark.parametrize("rps,lo,hi", [(50, 0.45, 0.55), (100, 0.97, 1.0)])
def test_utilization_tracks_offered_load(rps, lo, hi):
    tel = run_simulation(SimConfig(single(), {"s": 1}, 600, seed=1), stream(rps, 600, 1))
    assert lo <= measure_utilization(tel, "s", (0, 10)) <= hi


@pytest.mark.parametrize("kind", ["nested_rpc", "event_driven_rpc", "message_queue"])
def test_deterministic_and_conserving(kind):
    topo = chain(kind)
    cfg = SimConfig(topo, {s: 1 for s in topo.nodes}, 180, seed=5)
    a = run_simulation(cfg, stream(300, 180, 2))
    b = run_simulation(cfg, stream(300, 180, 2))
    assert np.array_equal(a.e2e_samples("q"), b.e2e_samples("q"))
    assert np.array_equal(a.busy, b.busy)
    assert a.arrivals.sum() == a.completions.sum() + a.in_flight + a.dropped.sum()
    for s in topo.nodes:
        i = a.services.index(s)
        assert a.visit_arrivals[:, i].sum() >= a.visit_completions[:, i].sum()


def test_response_time_excludes_downstream_wait():
    topo = chain("nested_rpc", n=2, ms=5.0)
    tel = run_simulation(SimConfig(topo, {"t0": 2, "t1": 2}, 120, seed=0), stream(50, 120, 0))
    own = tel.service_samples("t0")
    e2e = tel.e2e_samples("q")
    assert np.median(own) < 0.7 * np.median(e2e)


def test_message_queue_returns_before_consumer():
    topo = build_topology({
        "services": [{"id": "a", "service_time": {"q": {"kind": "deterministic", "mean_ms": 1}}},
                     {"id": "b", "service_time": {"q": {"kind": "deterministic", "mean_ms": 50}}}],
        "edges": [{"parent": "a", "child": "b", "kind": "message_queue"}],
        "classes": [{"id": "q", "path": ["a", "b"], "sla": {"percentile": 99, "latency_ms": 100}}]})
    tel = run_simulation(SimConfig(topo, {"a": 1, "b": 1}, 60), stream(5, 60, 3))
    assert np.median(tel.service_samples("a")) == pytest.approx(1.0)
    # the request finishes when the consumer does
    assert np.median(tel.e2e_samples("q")) >= 51.0


def test_high_priority_overtakes_low():
    topo = single(ms=8.0, kind="exponential", classes=("hi", "lo"), priority={"hi": "high", "lo": "low"})
    st = make_stream(LoadPattern("constant", 110, {"hi": 1, "lo": 1}), 600, 4)
    tel = run_simulation(SimConfig(topo, {"s": 1}, 600, seed=4), st)
    hi, lo = tel.e2e_samples("hi"), tel.e2e_samples("lo")
    assert np.percentile(hi, 99) < 0.5 * np.percentile(lo, 99)


def test_scale_to_same_count_is_noop():
    topo = single()
    sim = Simulation(SimConfig(topo, {"s": 2}, 60), stream(10, 60))
    assert apply_allocation(sim, "s", 2) is False
    assert apply_allocation(sim, "s", 3) is True and sim.replicas("s") == 3


def test_apply_allocation_errors():
    sim = Simulation(SimConfig(single(), {"s": 2}, 60), stream(10, 60))
    with pytest.raises(UnknownService):
        sim.apply_allocation("nope", 1)
    with pytest.raises(ConfigError):
        sim.apply_allocation("s", 0)


def scaled_run(start, to, rps, ms=10.0):
    topo = single(ms=ms, kind="exponential")

    def hook(sim, b):
        if b == 1:
            sim.apply_allocation("s", to)

    return run_simulation(SimConfig(topo, {"s": start}, 360), stream(rps, 360, 7), controller_hook=hook)


def test_scale_out_relieves_queue():
    tel = scaled_run(2, 4, 230)
    before = tel.queue_depth[:2, 0].mean()
    after = tel.queue_depth[3:, 0].mean()
    assert after < before
    assert np.percentile(tel.service_samples("s", None, 3, 6), 99) < np.percentile(
        tel.service_samples("s", None, 0, 2), 99)


def test_scale_in_saturates():
    tel = scaled_run(4, 1, 150)
    assert measure_utilization(tel, "s", (0, 2)) < 0.5
    assert measure_utilization(tel, "s", (3, 6)) > 0.98
    assert np.median(tel.service_samples("s", None, 4, 6)) > 5 * np.median(tel.service_samples("s", None, 0, 2))
    assert tel.replicas[-1, 0] == 1


def test_throttle_slows_service():
    topo = single(ms=5.0)
    throttle = [ThrottleEvent("s", 60, 120, 0.5)]
    tel = run_simulation(SimConfig(topo, {"s": 1}, 180), stream(20, 180, 1), throttle)
    assert np.median(tel.service_samples("s", None, 1, 2)) == pytest.approx(10.0, rel=0.05)
    assert np.median(tel.service_samples("s", None, 0, 1)) == pytest.approx(5.0, rel=0.05)


def test_stream_shorter_than_run():
    with pytest.raises(ArrivalGapError):
        Simulation(SimConfig(single(), {"s": 1}, 120), stream(10, 60))


def test_empty_window():
    tel = run_simulation(SimConfig(single(), {"s": 1}, 60), stream(10, 60))
    with pytest.raises(EmptyWindow):
        measure_utilization(tel, "s", (0, 5))


def test_hook_can_stop_run():
    tel = run_simulation(SimConfig(single(), {"s": 1}, 600), stream(10, 600),
                         controller_hook=lambda sim, b: b == 2)
    assert tel.completed_buckets == 3


def test_telemetry_exports(tmp_path):
    tel = run_simulation(SimConfig(single(), {"s": 1}, 120), stream(20, 120))
    text = tel.to_csv(str(tmp_path / "t.csv"))
    assert text.splitlines()[0] == "bucket,service,metric,value"
    assert (tmp_path / "t.csv").exists()
    assert tel.heatmap().shape == (2, 1)
    assert tel.to_json()["completed_buckets"] == 2


def test_invalid_config():
    with pytest.raises(ConfigError):
        SimConfig(single(), {"s": 0}, 60).validate()
    with pytest.raises(ConfigError):
        SimConfig(single(), {"s": 1}, 0).validate()
