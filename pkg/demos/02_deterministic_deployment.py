"""
Layer-by-layer deployment with deterministic policies
=====================================================

Each deployment collects N episodes with one greedy policy. The frontier
moves up a layer once the average bonus along the deployed trajectories
is small.
"""

# %%
from derl.deterministic import deployment_budget, run_deterministic_derl
from derl.hard import build_hard_mdp, enumerate_family_deterministic
from derl.mdp import evaluate_policy_exact, optimal_value_exact

family = enumerate_family_deterministic(4, 4, 0.25)
inst = build_hard_mdp(family[3])
pi, log = run_deterministic_derl(inst, None, epsilon=0.1, delta=0.1, c_K=2, N=5000, beta=1.0, seed=3)

# %% the log, one row per deployment
for r in log.records[:5]:
    print(f"k={r.k:3d} h_k={r.h_k} delta={r.delta:.4f} advanced={r.frontier_advanced}")
print("...")
print(log.terminal, "after", log.num_deployments, "of", deployment_budget(inst, 2), "allowed deployments")

# %% exact check of the returned policy
print("gap", optimal_value_exact(inst)[0] - evaluate_policy_exact(inst, pi))
print(log.to_csv(inst).splitlines()[0])
