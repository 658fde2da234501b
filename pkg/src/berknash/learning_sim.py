"""Simulated misspecified Bayesian learning.

Each period the state moves under the true kernel, the agent acts on its
current posterior, and the posterior over the parameter grid is updated by
Bayes' rule with the model likelihoods.

Two decision rules are available:

``anticipated``
    Treat the current posterior as permanent: solve the stationary problem
    under the belief-weighted kernel and play its greatest optimal action.
``belief_dp``
    Solve the belief-augmented dynamic programme on a barycentric grid over
    the belief simplex (at most three parameter values) and play its policy.

Randomness comes from a PCG64 generator seeded with the trajectory seed.
"""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field
from itertools import combinations_with_replacement

import numpy as np

from .equilibrium import Equilibrium
from .smdp_models import Belief, ModelFamily, Smdp

__all__ = [
    "ConvergenceReport",
    "Trajectory",
    "bayes_update",
    "convergence_diagnostics",
    "simulate_learning",
    "simplex_grid",
]

CSV_COLUMNS = ("period", "state", "action", "next_state", "posterior_mean", "posterior_sd")
SLACK = 1e-8
TABLE_LIMIT = 5_000_000


def _posterior(mass: np.ndarray, lik: np.ndarray) -> np.ndarray:
    support = mass > 0
    ls = lik[support]
    if ls.size and np.all(ls == ls[0]):
        if ls[0] == 0:
            raise ValueError("observation has zero likelihood under every supported model")
        return mass
    post = mass * lik
    total = post.sum()
    if total <= 0:
        raise ValueError("observation has zero likelihood under every supported model")
    return post / total


def bayes_update(belief: Belief, family: ModelFamily, s: int, x: int, s_next: int) -> Belief:
    """Posterior proportional to ``Q_theta(s_next | s, x) * belief(theta)``.

    Raises
    ------
    ValueError
        If every model in the belief's support gives the observation zero
        likelihood.
    """
    lik = family.rows(np.array([s]), np.array([x]))[:, 0, s_next]
    post = _posterior(belief.mass, lik)
    return belief if post is belief.mass else Belief(post)


@dataclass(frozen=True, eq=False)
class Trajectory:
    """A simulated learning path.

    Arrays are indexed by period; beliefs are recorded after each update.
    ``snapshots`` maps a period to the full posterior at that period.
    """

    seed: int
    initial_state_dist: np.ndarray
    periods: int
    mode: str
    states: np.ndarray
    actions: np.ndarray
    next_states: np.ndarray
    posterior_mean: np.ndarray
    posterior_sd: np.ndarray
    snapshots: dict
    final_belief: Belief
    resolve_every: int = 1
    max_projection_error: float = 0.0

    def rows(self):
        for t in range(self.periods):
            yield (
                t,
                int(self.states[t]),
                int(self.actions[t]),
                int(self.next_states[t]),
                float(self.posterior_mean[t]),
                float(self.posterior_sd[t]),
            )

    def to_csv(self, target=None) -> str | None:
        """Write the path as CSV; returns the text when ``target`` is None."""
        buf = io.StringIO() if target is None else None
        fh = buf if buf is not None else (open(target, "w", newline="") if isinstance(target, str) else target)
        try:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(CSV_COLUMNS)
            for r in self.rows():
                w.writerow([r[0], r[1], r[2], r[3], repr(r[4]), repr(r[5])])
        finally:
            if isinstance(target, str):
                fh.close()
        return buf.getvalue() if buf is not None else None


def _likelihood_table(family: ModelFamily) -> np.ndarray | None:
    k0 = family.kernel(0).probs
    if family.n_theta * k0.size > TABLE_LIMIT:
        return None
    return family.stacked()


def _expected_payoff(smdp: Smdp, kbar: np.ndarray) -> np.ndarray:
    op = smdp.mdp.outcome_payoff
    if op is None:
        return smdp.mdp.payoff
    return np.einsum("sxt,sxt->sx", kbar, op)


def _greatest_optimal(kbar: np.ndarray, u: np.ndarray, beta: float, start: np.ndarray) -> np.ndarray:
    """Policy iteration from ``start``, then the greatest action within slack."""
    S = kbar.shape[0]
    rows = np.arange(S)
    act = start.copy()
    eye = np.eye(S)
    for _ in range(1000):
        v = np.linalg.solve(eye - beta * kbar[rows, act], u[rows, act])
        q = u + beta * (kbar @ v)
        best = q.max(axis=1)
        keep = q[rows, act] >= best - 1e-12
        if np.all(keep):
            break
        act = np.where(keep, act, np.argmax(q, axis=1))
    ok = q >= best[:, None] - SLACK
    return ok.shape[1] - 1 - np.argmax(ok[:, ::-1], axis=1)


def simplex_grid(n_theta: int, points_per_dim: int = 51) -> np.ndarray:
    """Barycentric grid with ``points_per_dim`` nodes along each edge."""
    k = points_per_dim - 1
    nodes = []
    for combo in combinations_with_replacement(range(n_theta), k):
        nodes.append(np.bincount(combo, minlength=n_theta) / k)
    return np.unique(np.array(nodes), axis=0)


def _belief_dp_policy(smdp: Smdp, table: np.ndarray, nodes: np.ndarray, tol: float = 1e-10):
    """Greatest optimal action for every (state, belief node)."""
    beta = smdp.mdp.discount
    S, X = smdp.mdp.n_states, smdp.mdp.n_actions
    B = nodes.shape[0]
    kbar = np.einsum("bi,isxt->bsxt", nodes, table)
    post = nodes[:, None, None, None, :] * np.moveaxis(table, 0, -1)[None]  # [b,s,x,t,i]
    tot = post.sum(axis=-1, keepdims=True)
    post = np.divide(post, tot, out=np.repeat(nodes[:, None, None, None, :], S, 1).repeat(X, 2).repeat(S, 3), where=tot > 0)
    flat = post.reshape(-1, nodes.shape[1])
    d2 = (flat**2).sum(1)[:, None] - 2 * flat @ nodes.T + (nodes**2).sum(1)[None]
    nxt = np.argmin(d2, axis=1).reshape(B, S, X, S)
    op = smdp.mdp.outcome_payoff
    if op is None:
        reward = np.broadcast_to(smdp.mdp.payoff[None, :, :, None], (B, S, X, S))
    else:
        reward = np.broadcast_to(op[None], (B, S, X, S))
    V = np.zeros((S, B))
    t_idx = np.arange(S)[None, None, None, :]
    thr = tol * (1 - beta) / beta
    for _ in range(100_000):
        cont = V[t_idx, nxt]  # [b,s,x,t]
        q = (kbar * (reward + beta * cont)).sum(-1)  # [b,s,x]
        V_new = q.max(axis=-1).T
        if np.max(np.abs(V_new - V)) <= thr:
            V = V_new
            break
        V = V_new
    cont = V[t_idx, nxt]
    q = (kbar * (reward + beta * cont)).sum(-1)
    ok = q >= q.max(axis=-1, keepdims=True) - SLACK
    greatest = X - 1 - np.argmax(ok[..., ::-1], axis=-1)  # [b,s]
    return greatest.T  # [s,b]


def simulate_learning(
    smdp: Smdp,
    prior: Belief,
    periods: int,
    seed: int = 0,
    mode: str = "anticipated",
    initial_state_dist=None,
    resolve_every: int = 1,
    snapshot_every: int | None = None,
    belief_points: int = 51,
) -> Trajectory:
    """Simulate ``periods`` transitions with Bayesian updating.

    Parameters
    ----------
    prior : Belief
        Full support is recommended; zero-mass parameters never revive.
    mode : {"anticipated", "belief_dp"}
    initial_state_dist : array_like, optional
        Distribution of the first state; uniform by default.
    resolve_every : int
        Re-solve the anticipated-utility problem every this many periods.
    snapshot_every : int, optional
        Cadence of full posterior snapshots (default: about 100 per path).

    Raises
    ------
    ValueError
        For ``belief_dp`` with more than three parameter values, or when an
        observation has zero likelihood under the whole posterior support.
    """
    if periods < 1:
        raise ValueError("periods must be at least 1")
    if mode not in ("anticipated", "belief_dp"):
        raise ValueError(f"unknown mode {mode!r}")
    fam = smdp.family
    n = fam.n_theta
    if prior.mass.size != n:
        raise ValueError(f"prior has {prior.mass.size} points but the model family has {n}")
    if mode == "belief_dp" and n > 3:
        raise ValueError("belief_dp mode needs at most three parameter values")
    S, X = smdp.mdp.n_states, smdp.mdp.n_actions
    q0 = np.full(S, 1.0 / S) if initial_state_dist is None else np.asarray(initial_state_dist, float)
    rng = np.random.Generator(np.random.PCG64(seed))
    draws = rng.random(periods + 1)
    truth_cdf = np.cumsum(smdp.mdp.kernel.probs, axis=-1)
    table = _likelihood_table(fam)
    if table is None and mode == "belief_dp":
        raise ValueError("model too large for belief_dp")
    grid = fam.theta_grid.points
    snap = snapshot_every or max(1, periods // 100)

    def lik(s, x, t):
        if table is not None:
            return table[:, s, x, t]
        return fam.rows(np.array([s]), np.array([x]))[:, 0, t]

    states = np.empty(periods, dtype=np.int64)
    actions = np.empty(periods, dtype=np.int64)
    nexts = np.empty(periods, dtype=np.int64)
    means = np.empty(periods)
    sds = np.empty(periods)
    snapshots = {}
    mass = prior.mass.copy()
    s = int(min(np.searchsorted(np.cumsum(q0), draws[0] * q0.sum(), side="right"), S - 1))
    act_map = np.zeros(S, dtype=int)
    solved_for = None
    max_proj = 0.0
    if mode == "belief_dp":
        nodes = simplex_grid(n, belief_points)
        dp_policy = _belief_dp_policy(smdp, table, nodes)

    for t in range(periods):
        if mode == "anticipated":
            if solved_for is not mass and t % resolve_every == 0:
                if table is not None:
                    kbar = np.tensordot(mass, table, axes=1)
                else:
                    kbar = sum(mass[i] * fam.kernel(i).probs for i in np.flatnonzero(mass))
                act_map = _greatest_optimal(kbar, _expected_payoff(smdp, kbar), smdp.mdp.discount, act_map)
                solved_for = mass
            x = int(act_map[s])
        else:
            d = np.sum((nodes - mass) ** 2, axis=1)
            k = int(np.argmin(d))
            max_proj = max(max_proj, float(np.abs(nodes[k] - mass).sum()))
            x = int(dp_policy[s, k])
        row = truth_cdf[s, x]
        s_next = int(min(np.searchsorted(row, draws[t + 1] * row[-1], side="right"), S - 1))
        mass = _posterior(mass, lik(s, x, s_next))
        states[t], actions[t], nexts[t] = s, x, s_next
        mu = float(mass @ grid)
        means[t] = mu
        sds[t] = np.sqrt(max(float(mass @ (grid - mu) ** 2), 0.0))
        if (t + 1) % snap == 0 or t == periods - 1:
            snapshots[t] = Belief(mass / mass.sum())
        s = s_next
    return Trajectory(
        seed=seed,
        initial_state_dist=q0,
        periods=periods,
        mode=mode,
        states=states,
        actions=actions,
        next_states=nexts,
        posterior_mean=means,
        posterior_sd=sds,
        snapshots=snapshots,
        final_belief=Belief(mass / mass.sum()),
        resolve_every=resolve_every,
        max_projection_error=max_proj,
    )


@dataclass(frozen=True)
class ConvergenceReport:
    """Distance of a learning path from an equilibrium.

    ``tv_distance`` compares tail (second half) state-action frequencies
    with ``m*``; ``mean_distance`` is the final posterior mean's distance to
    ``theta*``. Window statistics cover the last three dyadic windows
    ``[T/8, T/4)``, ``[T/4, T/2)`` and ``[T/2, T)``.
    """

    tv_distance: float
    mean_distance: float
    window_tv: tuple
    window_mean_distance: tuple
    declining: bool
    tail_action_frequency: np.ndarray
    converged: bool
    threshold: float = field(default=0.02)


def _freq(states, actions, S, X):
    f = np.zeros((S, X))
    np.add.at(f, (states, actions), 1.0)
    return f / max(f.sum(), 1.0)


def convergence_diagnostics(
    trajectory: Trajectory, eq: Equilibrium, threshold: float = 0.02
) -> ConvergenceReport:
    """Compare a learning path with an equilibrium."""
    S, X = eq.m_star.mass.shape
    T = trajectory.periods
    st, ac = trajectory.states, trajectory.actions
    tail = slice(T // 2, T)
    emp = _freq(st[tail], ac[tail], S, X)
    tv = 0.5 * float(np.abs(emp - eq.m_star.mass).sum())
    dist = abs(float(trajectory.posterior_mean[-1]) - eq.theta_star)
    wins = [(T // 8, T // 4), (T // 4, T // 2), (T // 2, T)]
    w_tv, w_mean = [], []
    for a, b in wins:
        b = max(b, a + 1)
        w_tv.append(0.5 * float(np.abs(_freq(st[a:b], ac[a:b], S, X) - eq.m_star.mass).sum()))
        w_mean.append(float(np.mean(np.abs(trajectory.posterior_mean[a:b] - eq.theta_star))))
    declining = all(np.diff(w_tv) <= 1e-12) and all(np.diff(w_mean) <= 1e-12)
    counts = np.zeros((S, X))
    np.add.at(counts, (st[tail], ac[tail]), 1.0)
    per_state = counts.sum(axis=1, keepdims=True)
    cond = np.divide(counts, per_state, out=np.full((S, X), np.nan), where=per_state > 0)
    return ConvergenceReport(
        tv_distance=tv,
        mean_distance=dist,
        window_tv=tuple(w_tv),
        window_mean_distance=tuple(w_mean),
        declining=bool(declining),
        tail_action_frequency=cond,
        converged=bool(tv <= threshold and dist <= threshold),
        threshold=threshold,
    )
