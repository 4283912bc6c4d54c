"""Throttle the leaf of a five-tier chain and watch who slows down.

With nested RPC the caller's worker thread stays busy while it waits, so a
slow leaf drains the thread pool one tier up.  Over a message queue the
producer publishes and moves on.
"""
from meshsla.scenario import load_preset
from meshsla.simulator import SimConfig, run_simulation
from meshsla.stats import empirical_quantile
from meshsla.workload import make_stream

for name in ("chain5_nested", "chain5_event", "chain5_mq"):
    sc = load_preset(name)
    duration = sc.raw["simulate"]["duration_s"]
    stream = make_stream(sc.pattern("constant"), duration, sc.seed)
    tel = run_simulation(SimConfig(sc.topology, {s: 1 for s in sc.topology.nodes}, duration,
                                   seed=sc.seed, telemetry_bucket_s=sc.bucket_s),
                         stream, sc.throttles())

    # buckets 0-2 are before the throttle, 3-5 during it
    row = []
    for s in sc.topology.nodes:
        before = empirical_quantile(tel.service_samples(s, None, 0, 3), 99)
        during = empirical_quantile(tel.service_samples(s, None, 3, 6), 99)
        row.append(f"{s} x{during / before:5.2f}")
    print(f"{name:14s}", "  ".join(row))

# p99 heat map of the nested run, one row per minute
print()
print("nested chain, per-minute p99 (ms)")
sc = load_preset("chain5_nested")
stream = make_stream(sc.pattern("constant"), 600, sc.seed)
tel = run_simulation(SimConfig(sc.topology, {s: 1 for s in sc.topology.nodes}, 600, seed=sc.seed,
                               telemetry_bucket_s=sc.bucket_s), stream, sc.throttles())
for b, row in enumerate(tel.heatmap()):
    print(f"min {b:2d}", " ".join(f"{v:8.1f}" for v in row))
