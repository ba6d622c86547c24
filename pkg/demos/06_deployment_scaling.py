"""
Deployments against d*H
=======================

Deterministic deployments grow with d*H on the lower-bound family, while
mixture-policy deployments stay at H. A reduced grid keeps this quick;
the acceptance suite runs d in {4, 6}, H in {4, 6, 8}.
"""

# %%
from derl.harness import lower_bound_scaling

report = lower_bound_scaling([4, 6], [4, 6], 0.1, 20000, [0], beta=0.5, arb_N=100000, arb_i_max=5000)
for cell in report.aggregate["cells"]:
    print(cell)
print("slope", round(report.aggregate["slope"], 3), "R2", round(report.aggregate["r2"], 3))
print("mixture deployments", sorted({(r["H"], r["K_arb"]) for r in report.rows}))
