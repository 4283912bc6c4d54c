"""The simulator against Pollaczek-Khinchine.

One server, deterministic 10 ms service, Poisson arrivals.  The mean wait
of an M/D/1 queue is rho * S / (2 (1 - rho)).
"""
import numpy as np

from meshsla.model import build_topology
from meshsla.simulator import SimConfig, run_simulation
from meshsla.workload import LoadPattern, make_stream

topo = build_topology({
    "services": [{"id": "server", "worker_threads_per_replica": 1,
                  "service_time": {"q": {"kind": "deterministic", "mean_ms": 10}}}],
    "edges": [],
    "classes": [{"id": "q", "path": ["server"], "sla": {"percentile": 99, "latency_ms": 100}}],
})

print(" rho   simulated   P-K     requests")
for rps in (20, 50, 70, 85):
    rho = rps * 0.010
    stream = make_stream(LoadPattern("constant", rps, {"q": 1}), 2000, seed=rps)
    tel = run_simulation(SimConfig(topo, {"server": 1}, 2000, seed=1), stream)
    wait = tel.e2e_samples("q").mean() - 10
    print(f"{rho:4.2f}  {wait:9.3f}  {rho * 10 / (2 * (1 - rho)):7.3f}   {len(stream)}")
