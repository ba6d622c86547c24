"""
A lower-bound instance, inspected by brute force
================================================

One bumped transition hides the only policy that beats the rest.
"""

# %%
import numpy as np

from derl.hard import HardInstanceSpec, build_hard_mdp, optimal_path, optimal_value
from derl.mdp import enumerate_policies, evaluate_policy_exact

spec = HardInstanceSpec(d=4, H=4, h_sharp=2, i_sharp=1, core_indices=(0, 0, 0, 0), epsilon=0.1)
inst = build_hard_mdp(spec)
print("feature dim", inst.d, "horizon", inst.H, "states per layer", inst.states_per_layer)

# %% every behaviourally distinct deterministic policy
values = np.array([evaluate_policy_exact(inst, p) for p in enumerate_policies(inst)])
print(len(values), "policies; values:", np.unique(values.round(12)))
print("closed form optimum", optimal_value(spec), "reached along", optimal_path(spec))
