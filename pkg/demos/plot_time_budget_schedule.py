"""
Splitting a time budget between two networks
============================================

Each 64x64 CTU of a P frame can be left alone, sent through the small intra
network (cost t1) or through the larger inter network (cost t2). Given a
per-frame budget, the scheduler picks how many CTUs go to each network so
that the modelled MSE reduction is as large as possible.
"""

import numpy as np

from qecnn.tqeo import CostModel, DEFAULT_RATIOS, build_lut, get_model, solve_p_frame

cost = CostModel()
print(f"t1 = {cost.t1} ms, t2 = {cost.t2} ms, t1/t2 = {cost.ratio:.4f}")

# %%
# The modelled gain of a CTU depends on its MAD rank, normalised to [0, 1].
# Busy CTUs (small rank) gain the most, and the inter network always wins.
model = get_model(32)
x = np.linspace(0, 1, 5)
for k in (1, 2):
    print(f"k={k}:", np.round(model(k, x), 3))

# %%
# A 1080p frame has 480 full CTUs. Sweep the budget from 10% to 90% of
# T_max = N * t2 and watch the mix shift from many cheap CTUs to fewer
# expensive ones.
for qp in (32, 42):
    lut = build_lut(qp, 480, DEFAULT_RATIOS, cost)
    print(f"qp {qp}:", [(r.n1, r.n2) for r in lut.rows])

# %%
# An absolute target works the same way once it is divided by T_max.
budget_ms = 16.67
n1, n2 = solve_p_frame(budget_ms / cost.t_max(480), 480, 37, cost)
print(f"{budget_ms} ms -> n1={n1}, n2={n2}, charge {cost.charge(n1, n2):.3f} ms")
