"""Feed the controller a load ramp by hand.

No simulator here: the per-second load of one service rises from 1x to 3x
the planned threshold and falls back.  Scale-out happens on the first
bucket the Welch test rejects; scale-in waits for three confirmations.
"""
import numpy as np

from meshsla.controller import BucketObservation, ControllerState, control_loop_step

rng = np.random.default_rng(3)
threshold = 20.0  # requests per second one replica can carry
recorded = rng.normal(threshold, 1.0, 30)
state = ControllerState(["api"], ["read"], {"api": {"read": threshold}},
                        {"api": {"read": recorded}}, {"api": 2})

ramp = np.concatenate([np.linspace(40, 120, 20), np.linspace(120, 40, 20)])
for b, total in enumerate(ramp):
    load = rng.poisson(total, (1, 1, 30)).astype(float)
    actions, _ = control_loop_step(state, BucketObservation(b, load))
    for a in actions:
        print(f"bucket {b:2d}  load {total:6.1f}  {a.reason:9s} {a.from_replicas} -> {a.to_replicas}")
print("optimizer calls:", state.optimizer_calls)
