"""
Mixture-policy deployment: one deployment per layer
===================================================

At each layer a cover of deterministic policies is grown until the
optimistic uncertainty value drops below 3 nu^2 / 8; the uniform mixture
over the cover is then deployed once.
"""

# %%
import numpy as np

from derl.arbitrary import reachability_coefficient, run_arbitrary_derl
from derl.deterministic import plan_from_dataset
from derl.mdp import evaluate_policy_exact, optimal_value_exact, random_linear_mdp

inst = random_linear_mdp(np.random.default_rng(1), 3, 3, 3, 3, concentration=0.05)
reach = reachability_coefficient(inst)
print("reachability per layer", np.round(reach.nu_per_layer, 4), reach.method)

# %%
data, covers = run_arbitrary_derl(inst, i_max=2000, eps0=5e-4, beta_prime=0.01, nu_min=reach.nu_min, N=2000)
for c in covers:
    print(f"layer {c.h}: {c.iterations} iterations, {len(c.members)} distinct policies, final value {c.values[-1]:.4f}")
print("deployments:", len(covers))

# %% plan on the collected data
pi, _ = plan_from_dataset(inst, data, None, inst.H, beta=0.1)
print("gap", optimal_value_exact(inst)[0] - evaluate_policy_exact(inst, pi))
