"""
Fuzzing the matrix inequalities
===============================
"""

# %%
import numpy as np

from derl.lemmas import (
    BatchSequence,
    matrix_perturbation_check,
    min_batch_size,
    run_all,
    trace_det_bridge_check,
    violation_set,
)

print(trace_det_bridge_check(np.eye(3), np.diag([1.0, 0.0, 0.0])))  # 1 <= 2 ln 2
print(matrix_perturbation_check(2 * np.eye(2), 0.1 * np.ones((2, 2)), np.array([1.0, 0.0])))

# %% how many batches can carry a lot of new information?
rng = np.random.default_rng(0)
N = min_batch_size(d=2, H=2, eps=0.5, c_K=2)
batches = [rng.standard_normal((N, 2)) for _ in range(9)]
batches = [b / np.maximum(np.linalg.norm(b, axis=1, keepdims=True), 1.0) for b in batches]
print("N =", N, "violating batches:", sorted(violation_set(BatchSequence.from_vectors(batches), 0.5)))

# %% the full fuzz campaign (smaller trial counts here)
for r in run_all(seed=0, trials=10**4, structured_trials=100):
    print(r)
