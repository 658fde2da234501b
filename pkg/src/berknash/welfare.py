"""Objective welfare of misspecified behaviour and its upper bound.

Welfare is always evaluated under the true kernel. The gap between the
welfare of an optimal (correctly specified) policy and that of the
misspecified equilibrium policy is compared with a bound built from

``m0``
    largest absolute payoff,
``m1``
    largest payoff slope in the action coordinate (forward differences),
``gamma``
    distance between the two policies in action units,
``k_star``
    largest KL divergence between the next-state rows the two policies
    induce under the true kernel.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass

import numpy as np
from scipy.special import rel_entr

from .equilibrium import Equilibrium
from .mdp_core import (
    Kernel,
    Mdp,
    Policy,
    invariant_joint_distribution,
    policy_value,
    solve_policy_iteration,
)
from .smdp_models import Smdp

__all__ = [
    "WelfareReport",
    "bretagnolle_huber",
    "correct_policy",
    "objective_welfare",
    "policy_gap",
    "theorem5_bound",
    "welfare_report",
]

BOUND_TOL = 1e-9


def objective_welfare(kernel_true: Kernel, payoff, discount: float, policy: Policy) -> np.ndarray:
    """Discounted payoff of ``policy`` under the true kernel, per initial state.

    Solves ``W = u_pi + discount * P_pi W`` exactly, then applies one
    residual correction.
    """
    u = np.asarray(payoff, dtype=float)
    w = policy_value(kernel_true, u, discount, policy)
    P = np.einsum("sx,sxt->st", policy.weights, kernel_true.probs)
    u_pi = np.einsum("sx,sx->s", policy.weights, u)
    r = u_pi + discount * P @ w - w
    if np.max(np.abs(r)) > 1e-12:
        w = w + np.linalg.solve(np.eye(len(w)) - discount * P, r)
    return w


def bretagnolle_huber(kl: float) -> float:
    """Upper bound ``2 * sqrt(1 - exp(-kl))`` on the L1 distance."""
    if kl < 0:
        raise ValueError("KL divergence must be nonnegative")
    if math.isinf(kl):
        return 2.0
    return 2.0 * math.sqrt(-math.expm1(-kl))


def theorem5_bound(
    m0: float, m1: float, gamma: float, k_star: float, discount: float, form: str = "certified"
) -> float:
    """Welfare-gap bound.

    Parameters
    ----------
    form : {"statement", "proof", "certified"}
        ``statement`` uses ``1 - exp(-k)``, ``proof`` uses its square root,
        ``certified`` returns the larger of the two.
    """
    if min(m0, m1, gamma, k_star) < 0:
        raise ValueError("bound inputs must be nonnegative")
    if not 0.0 <= discount < 1.0:
        raise ValueError("discount must lie in [0, 1)")
    e = 1.0 if math.isinf(k_star) else -math.expm1(-k_star)
    statement = (2 * discount * m0 * e + m1 * gamma) / (1 - discount)
    proof = (2 * discount * m0 * math.sqrt(e) + m1 * gamma) / (1 - discount)
    if form == "statement":
        return statement
    if form == "proof":
        return proof
    if form == "certified":
        return max(statement, proof)
    raise ValueError(f"unknown bound form {form!r}")


def _contraction_bound(m0, m1, gamma, k_star, discount) -> float:
    # one-step comparison of the two Bellman equations; the continuation
    # difference is bounded by half the L1 row distance times the welfare range
    l1 = bretagnolle_huber(k_star)
    return (m1 * gamma + discount * l1 * m0 / (1 - discount)) / (1 - discount)


def policy_gap(action_points, pi1: Policy, pi2: Policy) -> float:
    """Largest over states of the earth-mover distance between the action
    distributions; ``|x1(s) - x2(s)|`` for pure policies."""
    a = np.asarray(action_points, dtype=float)
    if a.size < 2:
        return 0.0
    F = np.cumsum(pi1.weights - pi2.weights, axis=1)[:, :-1]
    return float(np.max(np.abs(F) @ np.diff(a)))


def correct_policy(mdp: Mdp) -> Policy:
    """An optimal policy of the true MDP, by exact policy iteration."""
    _, acts = solve_policy_iteration(mdp)
    return Policy.from_actions(acts, mdp.n_actions)


@dataclass(frozen=True)
class WelfareReport:
    """Correct-versus-misspecified welfare comparison.

    ``bound`` is the certified bound (larger of ``statement_bound`` and
    ``proof_bound``). ``contraction_bound`` is a separately derived bound
    with an extra ``1 / (1 - discount)`` on the continuation term, reported
    for reference. ``smooth_applicable`` is False when the action grid is
    too coarse for the slope surrogate ``m1``.
    """

    w_correct: list
    w_misspec: list
    gap_supnorm: float
    bound: float
    m0: float
    m1: float
    gamma: float
    k_star: float
    bound_satisfied: bool
    statement_bound: float
    proof_bound: float
    contraction_bound: float
    k_star_recurrent: float
    smooth_applicable: bool
    discount: float

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=2, allow_nan=True)


def _row_kl(P1: np.ndarray, P2: np.ndarray) -> np.ndarray:
    return rel_entr(P1, P2).sum(axis=-1)


def welfare_report(
    smdp: Smdp | Mdp,
    eq: Equilibrium | Policy,
    correct: Policy | None = None,
) -> WelfareReport:
    """Compare the misspecified policy with a correct one under the truth.

    Parameters
    ----------
    smdp : Smdp or Mdp
        Only the true MDP is used.
    eq : Equilibrium or Policy
        The misspecified behaviour.
    correct : Policy, optional
        An optimal policy for the true MDP; computed when omitted.
    """
    mdp = smdp.mdp if isinstance(smdp, Smdp) else smdp
    pi_m = eq.policy if isinstance(eq, Equilibrium) else eq
    pi_c = correct_policy(mdp) if correct is None else correct
    K, u, beta = mdp.kernel, mdp.payoff, mdp.discount
    w_c = objective_welfare(K, u, beta, pi_c)
    w_m = objective_welfare(K, u, beta, pi_m)
    gap = float(np.max(np.abs(w_c - w_m)))

    a = mdp.actions.points
    smooth = a.size >= 3
    m0 = float(np.max(np.abs(u)))
    m1 = float(np.max(np.abs(np.diff(u, axis=1)) / np.diff(a))) if a.size >= 2 else 0.0
    gamma = policy_gap(a, pi_c, pi_m)
    P_c = np.einsum("sx,sxt->st", pi_c.weights, K.probs)
    P_m = np.einsum("sx,sxt->st", pi_m.weights, K.probs)
    kl = _row_kl(P_c, P_m)
    k_star = float(np.max(kl))
    rec = np.zeros(mdp.n_states, dtype=bool)
    for pi in (pi_c, pi_m):
        rec |= invariant_joint_distribution(K, pi).state_marginal > 0
    k_rec = float(np.max(kl[rec]))
    stmt = theorem5_bound(m0, m1, gamma, k_star, beta, "statement")
    proof = theorem5_bound(m0, m1, gamma, k_star, beta, "proof")
    bound = max(stmt, proof)
    return WelfareReport(
        w_correct=w_c.tolist(),
        w_misspec=w_m.tolist(),
        gap_supnorm=gap,
        bound=bound,
        m0=m0,
        m1=m1,
        gamma=gamma,
        k_star=k_star,
        bound_satisfied=bool(gap <= bound + BOUND_TOL),
        statement_bound=stmt,
        proof_bound=proof,
        contraction_bound=_contraction_bound(m0, m1, gamma, k_star, beta),
        k_star_recurrent=k_rec,
        smooth_applicable=bool(smooth),
        discount=beta,
    )
