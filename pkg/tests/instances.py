"""Seeded random instances shared by the test modules."""

import numpy as np
from scipy.stats import norm

from berknash.mdp_core import Grid, Kernel, Mdp, Policy, solve_policy_iteration


def _gauss_rows(means, points, sd):
    edges = np.concatenate(([-np.inf], 0.5 * (points[1:] + points[:-1]), [np.inf]))
    p = np.diff(norm.cdf((edges - means[..., None]) / sd), axis=-1)
    p = np.clip(p, 1e-300, None)
    return p / p.sum(axis=-1, keepdims=True)


def smooth_kernel(states, actions, persistence, action_effect, sd):
    means = persistence * states[:, None] + action_effect * actions[None, :]
    return Kernel(_gauss_rows(means, states, sd))


def random_smooth_instance(seed, n_states=7, n_actions=9):
    """True MDP with a concave-in-action payoff and a stochastically increasing
    Gaussian kernel, plus the policy of an agent who misjudges the action
    effect on next states.

    Returns ``(mdp, misspecified_policy)``.
    """
    rng = np.random.default_rng(seed)
    s = np.linspace(0.0, 1.0, n_states)
    a = np.linspace(0.0, 1.0, n_actions)
    curv = rng.uniform(0.5, 3.0)
    target = rng.uniform(0.2, 0.8)
    slope = rng.uniform(0.0, 1.0)
    u = -curv * (a[None, :] - target * s[:, None] - 0.1) ** 2 + slope * s[:, None]
    beta = rng.uniform(0.5, 0.95)
    rho, kappa, sd = rng.uniform(0.2, 0.7), rng.uniform(0.4, 1.0), rng.uniform(0.1, 0.4)
    sg, ag = Grid(s, "s"), Grid(a, "x")
    mdp = Mdp(sg, ag, smooth_kernel(s, a, rho, kappa, sd), u, beta)
    believed = kappa * rng.uniform(0.0, 0.3)
    subj = Mdp(sg, ag, smooth_kernel(s, a, rho, believed, sd), u, beta)
    _, acts = solve_policy_iteration(subj)
    return mdp, Policy.from_actions(acts, n_actions)
