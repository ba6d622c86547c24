"""Shared fixtures-as-functions for the test modules."""

import numpy as np

from derl.deterministic import RewardFreeDataset
from derl.mdp import stream


def exhaustive_dataset(instance, per_pair, seed=0, layers=None):
    """Every (s, a) of the chosen layers sampled ``per_pair`` times."""
    data = RewardFreeDataset.empty(instance)
    rng = stream(seed)
    for h in layers or range(1, instance.H + 1):
        S, A = instance.states_per_layer[h - 1], instance.num_actions
        s = np.repeat(np.arange(S), A * per_pair)
        a = np.tile(np.repeat(np.arange(A), per_pair), S)
        nxt = None
        if h < instance.H:
            nxt = (rng.random(len(s))[:, None] > instance.cdf[h - 1][s, a]).sum(axis=1)
        data.add_layer(h, s, a, nxt)
    return data
