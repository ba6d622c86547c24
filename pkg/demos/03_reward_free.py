"""
Explore once, plan for any reward
=================================
"""

# %%
import numpy as np

from derl.deterministic import plan_from_dataset, run_reward_free_exploration
from derl.harness import reward_family
from derl.mdp import evaluate_policy_exact, optimal_value_exact, random_linear_mdp

inst = random_linear_mdp(np.random.default_rng(7), d=3, H=3, states=3, num_actions=3)
data, log = run_reward_free_exploration(inst, epsilon=0.15, delta=0.1, c_K=2, N=10000, beta=0.1, seed=0)
print("exploration used", log.num_deployments, "deployments;", [data.size(h) for h in (1, 2, 3)], "transitions per layer")

# %% three rewards, one dataset
for i, reward in enumerate(reward_family(inst, extra=2, seed=1)):
    pi, v1 = plan_from_dataset(inst, data, reward, h_tilde=3, beta=0.1)
    gap = optimal_value_exact(inst, reward)[0] - evaluate_policy_exact(inst, pi, reward)
    print(f"reward {i}: planned V1={v1:.3f} gap={gap:.4f}")
