"""Explore, plan and run the social-network preset.

Takes a few minutes on one core: about a minute of exploration, then two
simulated hours of diurnal load.
"""
from meshsla.experiments import Planner, explore, run_closed_loop
from meshsla.scenario import load_preset

sc = load_preset("social_network")
store, summaries = explore(sc)
for s in summaries:
    print(f"{s.service:14s} {s.rows} rows, {s.samples:3d} samples, stopped by {s.termination}")
print("total samples:", sum(s.samples for s in summaries))

planner = Planner(sc, store)
print("E(alpha):", {c: round(v, 3) for c, v in planner.overestimation.items()})
plan = planner.plan()
for svc, lpr in plan.lpr.items():
    print(f"  {svc:14s} threshold", {c: round(v, 2) for c, v in lpr.items()})

for controller in ("ursa", "auto_a", "auto_b"):
    r = run_closed_loop(sc, planner, plan, "diurnal", controller=controller)
    worst = max(r.violation_rate, key=r.violation_rate.get)
    print(f"{controller:7s} mean CPU {r.mean_cpu:5.1f}  worst class {worst} "
          f"violates {r.violation_rate[worst]:.1%} of buckets")
