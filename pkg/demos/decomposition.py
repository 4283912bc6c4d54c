"""Splitting an end-to-end percentile across a chain.

If the per-service percentile residuals add up to no more than the
end-to-end residual, the sum of per-service quantiles bounds the
end-to-end quantile.  Check it on correlated lognormal latencies, then
ask the optimizer for the tightest split.
"""
import itertools

import numpy as np

from meshsla.model import SlaTarget
from meshsla.optimizer import ClassInputs, OptimizerInputs, ServiceInputs, tightest_upper_bound
from meshsla.stats import empirical_quantile, quantiles

grid = (90.0, 95.0, 99.0, 99.5, 99.9)
rng = np.random.default_rng(0)

# three services sharing a load factor
shared = rng.standard_normal((200_000, 1))
x = np.exp(np.array([1.0, 2.0, 1.5]) + 0.5 * (0.8 * shared + 0.6 * rng.standard_normal((200_000, 3))))
e2e = empirical_quantile(x.sum(axis=1), 99)
q = np.stack([quantiles(x[:, i], grid) for i in range(3)])
print(f"end-to-end p99 = {e2e:.2f} ms")

tenths = [round((100 - g) * 10) for g in grid]
rows = []
for combo in itertools.product(range(len(grid)), repeat=3):
    if sum(tenths[g] for g in combo) <= 10:
        rows.append((q[[0, 1, 2], combo].sum(), [grid[g] for g in combo]))
rows.sort()
print(f"{len(rows)} feasible splits; tightest three:")
for bound, split in rows[:3]:
    print(f"  {split}  bound {bound:.2f} ms  ({bound / e2e:.3f}x)")

# same answer from the knapsack DP
inp = OptimizerInputs(
    grid,
    {f"s{i}": ServiceInputs(f"s{i}", {"q": q[i][None, :]}, np.array([1.0]), [{}]) for i in range(3)},
    {"q": ClassInputs("q", (("s0", 1), ("s1", 1), ("s2", 1)), SlaTarget(99, 1e9), 1.0)},
)
res = tightest_upper_bound({"s0": 0, "s1": 0, "s2": 0}, inp, "q")
print(f"DP: {res.bound_ms:.2f} ms at {res.percentiles}")
