"""Finite Markov decision processes.

Grids, transition kernels, the Bellman operator, value iteration, optimal
policy correspondences with least and greatest selections, and invariant
state-action distributions of the chain induced by a policy.

All containers are immutable after construction: arrays are copied and
flagged read-only.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np
from scipy.sparse import csr_matrix
from scipy.sparse.csgraph import connected_components

__all__ = [
    "ConvergenceError",
    "Grid",
    "Kernel",
    "Mdp",
    "ValueFunction",
    "Policy",
    "PolicyCorrespondence",
    "JointDistribution",
    "bellman_rhs",
    "bellman_operator",
    "bellman_residual",
    "solve_value_function",
    "solve_policy_iteration",
    "optimal_policy_set",
    "least_selection",
    "greatest_selection",
    "state_transition_matrix",
    "stationary_distribution",
    "invariant_joint_distribution",
    "stationarity_residual",
    "policy_value",
]

ROW_SUM_TOL = 1e-12
DIRECT_SOLVE_MAX_STATES = 200


class ConvergenceError(RuntimeError):
    """An iterative solver hit its iteration cap before meeting its tolerance."""


def _frozen(a, dtype=float) -> np.ndarray:
    out = np.array(a, dtype=dtype, copy=True)
    out.setflags(write=False)
    return out


@dataclass(frozen=True, eq=False)
class Grid:
    """Ordered one-dimensional grid of real points.

    Parameters
    ----------
    points : array_like
        Strictly increasing coordinates.
    label : str
        Free-form name.
    coords : array_like, optional
        ``(n, d)`` coordinates when the grid enumerates a product space
        (for example wealth by preference shock). Defaults to ``points``
        as a single column. Used for componentwise orders.
    """

    points: np.ndarray
    label: str = ""
    coords: np.ndarray | None = None

    def __post_init__(self):
        pts = np.asarray(self.points, dtype=float).ravel()
        if pts.size < 1:
            raise ValueError("grid needs at least one point")
        if not np.all(np.isfinite(pts)):
            raise ValueError("grid points must be finite")
        if np.any(np.diff(pts) <= 0):
            raise ValueError("grid points must be strictly increasing")
        coords = pts[:, None] if self.coords is None else np.asarray(self.coords, float)
        if coords.ndim == 1:
            coords = coords[:, None]
        if coords.shape[0] != pts.size:
            raise ValueError("coords must have one row per grid point")
        object.__setattr__(self, "points", _frozen(pts))
        object.__setattr__(self, "coords", _frozen(coords))

    def __len__(self) -> int:
        return self.points.size

    @property
    def ndim(self) -> int:
        return self.coords.shape[1]

    def nearest(self, value: float) -> int:
        """Index of the grid point closest to ``value`` (lowest index on ties)."""
        return int(np.argmin(np.abs(self.points - value)))


@dataclass(frozen=True, eq=False)
class Kernel:
    """Transition probabilities indexed ``[state, action, next_state]``."""

    probs: np.ndarray

    def __post_init__(self):
        p = np.asarray(self.probs, dtype=float)
        if p.ndim != 3 or p.shape[0] != p.shape[2]:
            raise ValueError(f"kernel must have shape (S, X, S), got {p.shape}")
        if not np.all(np.isfinite(p)) or np.any(p < 0):
            raise ValueError("kernel entries must be finite and nonnegative")
        dev = np.abs(p.sum(axis=2) - 1.0)
        if np.any(dev > ROW_SUM_TOL):
            s, x = np.unravel_index(int(np.argmax(dev)), dev.shape)
            raise ValueError(f"kernel row (state={s}, action={x}) sums to {p[s, x].sum():.15g}")
        object.__setattr__(self, "probs", _frozen(p))

    @classmethod
    def normalized(cls, probs) -> "Kernel":
        """Build a kernel after dividing every row by its sum."""
        p = np.asarray(probs, dtype=float)
        return cls(p / p.sum(axis=2, keepdims=True))

    @property
    def n_states(self) -> int:
        return self.probs.shape[0]

    @property
    def n_actions(self) -> int:
        return self.probs.shape[1]


@dataclass(frozen=True, eq=False)
class Mdp:
    """Finite discounted MDP.

    Parameters
    ----------
    states, actions : Grid
    kernel : Kernel
    payoff : array_like or None
        Expected one-period payoff ``[state, action]``. May be omitted when
        ``outcome_payoff`` is supplied, in which case it is the expectation
        of ``outcome_payoff`` under ``kernel``.
    discount : float
        In ``[0, 1)``.
    outcome_payoff : array_like, optional
        Payoff realised on a transition, ``[state, action, next_state]``.
        When present, replacing the kernel (see :meth:`with_kernel`)
        recomputes the expected payoff under the new kernel.
    """

    states: Grid
    actions: Grid
    kernel: Kernel
    payoff: np.ndarray | None
    discount: float
    outcome_payoff: np.ndarray | None = None

    def __post_init__(self):
        S, X = len(self.states), len(self.actions)
        if self.kernel.probs.shape != (S, X, S):
            raise ValueError(
                f"kernel shape {self.kernel.probs.shape} does not match grids ({S}, {X}, {S})"
            )
        if not 0.0 <= float(self.discount) < 1.0:
            raise ValueError("discount must lie in [0, 1)")
        object.__setattr__(self, "discount", float(self.discount))
        if self.outcome_payoff is not None:
            op = np.asarray(self.outcome_payoff, dtype=float)
            if op.shape != (S, X, S) or not np.all(np.isfinite(op)):
                raise ValueError("outcome_payoff must be finite with shape (S, X, S)")
            object.__setattr__(self, "outcome_payoff", _frozen(op))
            if self.payoff is None:
                object.__setattr__(
                    self, "payoff", np.einsum("sxt,sxt->sx", self.kernel.probs, op)
                )
        if self.payoff is None:
            raise ValueError("either payoff or outcome_payoff is required")
        u = np.asarray(self.payoff, dtype=float)
        if u.shape != (S, X) or not np.all(np.isfinite(u)):
            raise ValueError(f"payoff must be finite with shape ({S}, {X})")
        object.__setattr__(self, "payoff", _frozen(u))

    @property
    def n_states(self) -> int:
        return len(self.states)

    @property
    def n_actions(self) -> int:
        return len(self.actions)

    def with_kernel(self, kernel: Kernel) -> "Mdp":
        """Same primitives with the transition kernel replaced."""
        if self.outcome_payoff is None:
            return Mdp(self.states, self.actions, kernel, self.payoff, self.discount)
        return Mdp(self.states, self.actions, kernel, None, self.discount, self.outcome_payoff)


@dataclass(frozen=True, eq=False)
class ValueFunction:
    values: np.ndarray

    def __post_init__(self):
        v = np.asarray(self.values, dtype=float).ravel()
        if not np.all(np.isfinite(v)):
            raise ValueError("value function must be finite")
        object.__setattr__(self, "values", _frozen(v))


@dataclass(frozen=True, eq=False)
class Policy:
    """Possibly mixed stationary policy, ``weights[state, action]``."""

    weights: np.ndarray

    def __post_init__(self):
        w = np.asarray(self.weights, dtype=float)
        if w.ndim != 2:
            raise ValueError("policy weights must be a matrix")
        if np.any(w < 0) or np.any(np.abs(w.sum(axis=1) - 1.0) > ROW_SUM_TOL):
            raise ValueError("policy rows must be probability vectors")
        object.__setattr__(self, "weights", _frozen(w))

    @classmethod
    def from_actions(cls, actions: Sequence[int], n_actions: int) -> "Policy":
        """Pure policy playing ``actions[s]`` in state ``s``."""
        idx = np.asarray(actions, dtype=int)
        w = np.zeros((idx.size, n_actions))
        w[np.arange(idx.size), idx] = 1.0
        return cls(w)

    @property
    def is_pure(self) -> bool:
        return bool(np.all(np.isclose(self.weights.max(axis=1), 1.0, rtol=0, atol=ROW_SUM_TOL)))

    @property
    def action_indices(self) -> np.ndarray:
        """Most likely action per state (lowest index on ties)."""
        return np.argmax(self.weights, axis=1)


@dataclass(frozen=True, eq=False)
class PolicyCorrespondence:
    """Per-state sets of optimal action indices."""

    optimal_sets: tuple
    slack: float

    def __post_init__(self):
        sets = tuple(tuple(sorted(int(a) for a in s)) for s in self.optimal_sets)
        if any(len(s) == 0 for s in sets):
            raise ValueError("every state needs at least one optimal action")
        object.__setattr__(self, "optimal_sets", sets)

    @property
    def is_singleton(self) -> bool:
        return all(len(s) == 1 for s in self.optimal_sets)


@dataclass(frozen=True, eq=False)
class JointDistribution:
    """Probability mass over the state-action grid, ``mass[state, action]``.

    ``multiple_ergodic_classes`` is set by
    :func:`invariant_joint_distribution` when the induced chain has more
    than one closed class.
    """

    mass: np.ndarray
    multiple_ergodic_classes: bool = False

    def __post_init__(self):
        m = np.asarray(self.mass, dtype=float)
        if m.ndim != 2:
            raise ValueError("joint distribution must be a matrix")
        if np.any(m < 0) or abs(m.sum() - 1.0) > ROW_SUM_TOL:
            raise ValueError("joint distribution must be nonnegative and sum to 1")
        object.__setattr__(self, "mass", _frozen(m))

    @classmethod
    def normalized(cls, mass, **kw) -> "JointDistribution":
        m = np.clip(np.asarray(mass, dtype=float), 0.0, None)
        return cls(m / m.sum(), **kw)

    @property
    def state_marginal(self) -> np.ndarray:
        return self.mass.sum(axis=1)

    def conditional_policy(self) -> Policy:
        """Action distribution given the state; uniform off the support."""
        ms = self.state_marginal
        w = np.full(self.mass.shape, 1.0 / self.mass.shape[1])
        on = ms > 0
        w[on] = self.mass[on] / ms[on, None]
        return Policy(w / w.sum(axis=1, keepdims=True))


def bellman_rhs(mdp: Mdp, v) -> np.ndarray:
    """Action values ``u(s, x) + beta * E[v(s') | s, x]``."""
    v = v.values if isinstance(v, ValueFunction) else np.asarray(v, dtype=float)
    return mdp.payoff + mdp.discount * (mdp.kernel.probs @ v)


def bellman_operator(mdp: Mdp, v) -> np.ndarray:
    return bellman_rhs(mdp, v).max(axis=1)


def bellman_residual(mdp: Mdp, v) -> float:
    """Sup-norm distance between ``v`` and its Bellman image."""
    vv = v.values if isinstance(v, ValueFunction) else np.asarray(v, dtype=float)
    return float(np.max(np.abs(vv - bellman_operator(mdp, vv))))


def solve_value_function(
    mdp: Mdp, tol: float = 1e-10, max_iter: int = 100_000, initial=None
) -> ValueFunction:
    """Value iteration to a sup-norm Bellman residual of at most ``tol``.

    Iteration stops once successive iterates differ by at most
    ``tol * (1 - beta) / beta``; the contraction property then bounds the
    residual of the returned iterate by ``tol``.

    Raises
    ------
    ConvergenceError
        If ``max_iter`` sweeps do not meet the stopping rule.
    """
    if tol <= 0:
        raise ValueError("tol must be positive")
    beta = mdp.discount
    v = np.zeros(mdp.n_states) if initial is None else np.array(initial, dtype=float)
    if beta == 0.0:
        return ValueFunction(bellman_operator(mdp, v))
    threshold = tol * (1.0 - beta) / beta
    S, X = mdp.n_states, mdp.n_actions
    flat_p = mdp.kernel.probs.reshape(S * X, S)
    flat_u = mdp.payoff.reshape(S * X)
    for _ in range(max_iter):
        v_new = (flat_u + beta * (flat_p @ v)).reshape(S, X).max(axis=1)
        if np.abs(v_new - v).max() <= threshold:
            return ValueFunction(v_new)
        v = v_new
    raise ConvergenceError(f"value iteration did not reach tol={tol} in {max_iter} sweeps")


def policy_value(kernel: Kernel, payoff, discount: float, policy: Policy) -> np.ndarray:
    """Discounted value of following ``policy`` forever under ``kernel``.

    Solves ``W = u_pi + beta * P_pi W`` directly.
    """
    w = policy.weights
    u_pi = np.einsum("sx,sx->s", w, np.asarray(payoff, dtype=float))
    P = state_transition_matrix(kernel, policy)
    A = np.eye(P.shape[0]) - discount * P
    return np.linalg.solve(A, u_pi)


def solve_policy_iteration(
    mdp: Mdp, initial_actions=None, max_iter: int = 1_000
) -> tuple[ValueFunction, np.ndarray]:
    """Howard policy iteration; returns the value and an optimal pure policy.

    The incumbent action is kept whenever it is within ``1e-12`` of the best
    action value, which rules out cycling between tied actions. Used where
    many small problems are solved in sequence with warm starts.
    """
    S = mdp.n_states
    act = np.zeros(S, dtype=int) if initial_actions is None else np.array(initial_actions, int)
    rows = np.arange(S)
    for _ in range(max_iter):
        P = mdp.kernel.probs[rows, act]
        v = np.linalg.solve(np.eye(S) - mdp.discount * P, mdp.payoff[rows, act])
        q = bellman_rhs(mdp, v)
        best = q.max(axis=1)
        keep = q[rows, act] >= best - 1e-12
        if np.all(keep):
            return ValueFunction(v), act
        act = np.where(keep, act, np.argmax(q, axis=1))
    raise ConvergenceError("policy iteration did not stabilise")


def optimal_policy_set(mdp: Mdp, v, slack: float = 1e-8) -> PolicyCorrespondence:
    """Actions whose Bellman right-hand side is within ``slack`` of the max."""
    q = bellman_rhs(mdp, v)
    best = q.max(axis=1, keepdims=True)
    ok = q >= best - slack
    return PolicyCorrespondence(tuple(tuple(np.flatnonzero(r)) for r in ok), slack)


def least_selection(pc: PolicyCorrespondence, n_actions: int | None = None) -> Policy:
    """Pure policy choosing the lowest optimal action index in every state."""
    n = n_actions if n_actions is not None else 1 + max(max(s) for s in pc.optimal_sets)
    return Policy.from_actions([s[0] for s in pc.optimal_sets], n)


def greatest_selection(pc: PolicyCorrespondence, n_actions: int | None = None) -> Policy:
    """Pure policy choosing the highest optimal action index in every state."""
    n = n_actions if n_actions is not None else 1 + max(max(s) for s in pc.optimal_sets)
    return Policy.from_actions([s[-1] for s in pc.optimal_sets], n)


def state_transition_matrix(kernel: Kernel, policy: Policy) -> np.ndarray:
    """State chain ``P[s, s'] = sum_x policy(x|s) Q(s'|s, x)``."""
    return np.einsum("sx,sxt->st", policy.weights, kernel.probs)


def _closed_classes(P: np.ndarray) -> list[np.ndarray]:
    n = P.shape[0]
    if n <= DIRECT_SOLVE_MAX_STATES:
        # transitive closure by repeated squaring
        reach = (P > 0) | np.eye(n, dtype=bool)
        for _ in range(max(1, int(np.ceil(np.log2(n))))):
            nxt = (reach.astype(np.float64) @ reach.astype(np.float64)) > 0
            if np.array_equal(nxt, reach):
                break
            reach = nxt
        # recurrent states reach only states that reach them back
        recurrent = np.all(~reach | reach.T, axis=1)
        closed, seen = [], np.zeros(n, dtype=bool)
        for i in np.flatnonzero(recurrent):
            if not seen[i]:
                members = np.flatnonzero(reach[i])
                seen[members] = True
                closed.append(members)
        return closed
    adj = csr_matrix(P > 0)
    n_comp, labels = connected_components(adj, directed=True, connection="strong")
    closed = []
    for c in range(n_comp):
        members = np.flatnonzero(labels == c)
        outside = np.ones(P.shape[0], dtype=bool)
        outside[members] = False
        if not np.any(P[np.ix_(members, outside)] > 0):
            closed.append(members)
    return closed


def _class_stationary(P_cc: np.ndarray) -> np.ndarray:
    n = P_cc.shape[0]
    A = P_cc.T - np.eye(n)
    A[-1, :] = 1.0
    b = np.zeros(n)
    b[-1] = 1.0
    return np.linalg.solve(A, b)


def _direct_limit(P: np.ndarray, closed: list, start: int) -> np.ndarray:
    n = P.shape[0]
    pi = np.zeros(n)
    in_closed = np.zeros(n, dtype=bool)
    for c in closed:
        in_closed[c] = True
    transient = np.flatnonzero(~in_closed)
    for c in closed:
        if start in c:
            weight = 1.0
        elif start in transient:
            A = np.eye(transient.size) - P[np.ix_(transient, transient)]
            b = P[np.ix_(transient, c)].sum(axis=1)
            h = np.linalg.solve(A, b)
            weight = float(h[np.searchsorted(transient, start)])
        else:
            weight = 0.0
        if weight > 0:
            pi[c] += weight * _class_stationary(P[np.ix_(c, c)])
    return pi


def stationary_distribution(
    P: np.ndarray, tol: float = 1e-12, start: int = 0, max_doublings: int = 64
) -> tuple[np.ndarray, bool]:
    """Long-run state distribution of the chain ``P`` started at ``start``.

    Chains with at most 200 states are solved directly: each closed class
    gets its own stationary law and these are mixed with the absorption
    probabilities from ``start``. Larger chains iterate the lazy chain
    ``(I + P) / 2`` from ``start`` (its limit equals the Cesaro limit of
    ``P``), doubling the step count each round, until the balance residual
    is at most ``tol``; if rounding stalls the iteration, the direct solve
    is used instead.

    Returns
    -------
    pi : ndarray
    multiple : bool
        True when the chain has more than one closed class.
    """
    P = np.asarray(P, dtype=float)
    n = P.shape[0]
    closed = _closed_classes(P)
    multiple = len(closed) > 1
    pi = None
    if n > DIRECT_SOLVE_MAX_STATES:
        step = 0.5 * (np.eye(n) + P)
        p = np.zeros(n)
        p[start] = 1.0
        for _ in range(max_doublings):
            p = p @ step
            if np.max(np.abs(p @ P - p)) <= tol:
                pi = p
                break
            step = step @ step
    if pi is None:
        pi = _direct_limit(P, closed, start)
    pi = np.clip(pi, 0.0, None)
    return pi / pi.sum(), multiple


def invariant_joint_distribution(
    kernel: Kernel, policy: Policy, tol: float = 1e-12
) -> JointDistribution:
    """Stationary state-action distribution ``m(s, x) = m_S(s) policy(x|s)``."""
    if policy.weights.shape != kernel.probs.shape[:2]:
        raise ValueError("policy and kernel dimensions disagree")
    P = state_transition_matrix(kernel, policy)
    pi, multiple = stationary_distribution(P, tol=tol)
    m = pi[:, None] * policy.weights
    return JointDistribution(m / m.sum(), multiple_ergodic_classes=multiple)


def stationarity_residual(m: JointDistribution, kernel: Kernel) -> float:
    """Sup-norm gap between the state marginal of ``m`` and its image under ``kernel``."""
    nxt = np.einsum("sx,sxt->t", m.mass, kernel.probs)
    return float(np.max(np.abs(nxt - m.state_marginal)))
