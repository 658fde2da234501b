"""Berk-Nash equilibria: scalar fixed-point search and independent verification.

An equilibrium is a state-action distribution ``m*`` with a belief ``mu*``
such that (a) actions played by ``m*`` are optimal under the belief-weighted
kernel, (b) ``mu*`` sits on the parameters minimising the ``m*``-weighted KL
divergence, and (c) the state marginal of ``m*`` is invariant under the true
kernel.

The solver searches over Dirac beliefs. For each grid node it solves the
subjective MDP, takes the least or greatest optimal selection, computes the
stationary distribution under the truth, and infers the best-fit parameter.
Sign changes of ``h(theta) = fit(theta) - theta`` are bracketed on the grid
and refined by bisection. At nodes where the agent is indifferent, mixed
equilibria are found by bisecting on a state-independent mixing weight.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from .mdp_core import (
    JointDistribution,
    Policy,
    PolicyCorrespondence,
    ValueFunction,
    bellman_rhs,
    greatest_selection,
    invariant_joint_distribution,
    least_selection,
    optimal_policy_set,
    solve_policy_iteration,
    solve_value_function,
    stationarity_residual,
)
from .smdp_models import (
    AbsoluteContinuityError,
    Belief,
    BestFit,
    Smdp,
    best_fit,
    best_fit_set,
    check_regularity,
    weighted_kl_profile,
)

__all__ = [
    "ConsistencyTrace",
    "Equilibrium",
    "MapImage",
    "NoEquilibriumError",
    "ResidualReport",
    "SolverOptions",
    "consistency_map",
    "consistency_trace",
    "equilibrium_map_apply",
    "solve_berk_nash",
    "verify_equilibrium",
]

SELECTIONS = ("least", "greatest")


class NoEquilibriumError(RuntimeError):
    """The search found no candidate passing verification."""

    def __init__(self, message: str, diagnostics: dict | None = None):
        super().__init__(message)
        self.diagnostics = diagnostics or {}


@dataclass(frozen=True)
class ResidualReport:
    """Residuals of the three equilibrium conditions.

    optimality_gap
        Largest Bellman shortfall of an action played with positive mass,
        under the belief-weighted kernel.
    inference_gap
        Largest weighted-KL excess of a supported parameter over the grid
        minimum.
    stationarity_gap
        Sup-norm balance error of the state marginal under the true kernel.
    """

    optimality_gap: float
    inference_gap: float
    stationarity_gap: float

    @property
    def worst(self) -> float:
        return max(self.optimality_gap, self.inference_gap, self.stationarity_gap)

    def ok(self, tol: float) -> bool:
        return self.worst <= tol

    def as_dict(self) -> dict:
        return {
            "optimality_gap": self.optimality_gap,
            "inference_gap": self.inference_gap,
            "stationarity_gap": self.stationarity_gap,
        }


@dataclass(frozen=True, eq=False)
class Equilibrium:
    """A solved (or candidate) equilibrium bundle.

    ``kind`` is ``"pure"`` or ``"mixed"``; ``selection`` records which
    optimal selection produced it. ``theta_star`` is the refined real
    best-fit parameter; ``mu_star`` is a belief on the grid.
    """

    m_star: JointDistribution
    mu_star: Belief
    theta_star: float
    policy: Policy
    value: ValueFunction
    residuals: ResidualReport
    kind: str = "pure"
    selection: str = ""
    mixing_weight: float | None = None
    on_boundary: bool = False

    def summary(self) -> dict:
        return {
            "theta_star": self.theta_star,
            "kind": self.kind,
            "selection": self.selection,
            "mixing_weight": self.mixing_weight,
            "on_boundary": self.on_boundary,
            "m_star": self.m_star.mass.tolist(),
            "state_marginal": self.m_star.state_marginal.tolist(),
            "mu_star_support": self.mu_star.support.tolist(),
            "policy": self.policy.weights.tolist(),
            "value": self.value.values.tolist(),
            "residuals": self.residuals.as_dict(),
        }


@dataclass(frozen=True)
class SolverOptions:
    """Tolerances and switches for :func:`solve_berk_nash`.

    Parameters
    ----------
    vi_tol : float
        Value-iteration Bellman residual target.
    slack : float
        Indifference slack for optimal action sets.
    fit_tol : float
        Weighted-KL tolerance defining the best-fit set.
    root_tol : float
        Target ``|h|`` for bisection on the parameter and on mixing weights.
    verify_tol : float
        Largest residual accepted for a returned equilibrium.
    mix_grid : int
        Number of mixing weights pre-scanned at each indifference node.
    include_unidentified : bool
        Also return Dirac equilibria whose on-path data leave the parameter
        unidentified (set-valued best fit) when they verify.
    force : bool
        Skip the regularity pre-check.
    max_refits : int
        Rounds of nuisance-parameter refitting inside the consistency map.
    scan_stride : int
        Pre-scan every ``scan_stride``-th grid node (both ends always).
    method : {"auto", "value_iteration", "policy_iteration"}
        Dynamic-programming solver for the subjective problems. ``"auto"``
        uses policy iteration (exact up to a dense linear solve) for at
        most 2000 states and value iteration above that.
    """

    vi_tol: float = 1e-10
    slack: float = 1e-8
    fit_tol: float = 1e-10
    root_tol: float = 1e-8
    verify_tol: float = 1e-7
    mix_grid: int = 41
    include_unidentified: bool = False
    force: bool = True
    max_refits: int = 5
    scan_stride: int = 1
    method: str = "auto"


@dataclass(frozen=True, eq=False)
class ConsistencyTrace:
    """Everything computed by one evaluation of the consistency map."""

    theta_in: float
    index: int
    selection: str
    correspondence: PolicyCorrespondence
    value: ValueFunction
    policy: Policy
    m: JointDistribution
    fit: BestFit

    @property
    def theta_out(self) -> float:
        return self.fit.theta

    @property
    def tie(self) -> bool:
        return self.fit.tie


def _select(pc: PolicyCorrespondence, selection: str, n_actions: int) -> Policy:
    if selection == "least":
        return least_selection(pc, n_actions)
    if selection == "greatest":
        return greatest_selection(pc, n_actions)
    raise ValueError(f"unknown selection {selection!r}")


PI_STATE_LIMIT = 2000


def solve_subjective(mdp, opts: SolverOptions) -> ValueFunction:
    """Value function of a subjective problem with the configured method."""
    method = opts.method
    if method == "auto":
        method = "policy_iteration" if mdp.n_states <= PI_STATE_LIMIT else "value_iteration"
    if method == "value_iteration":
        return solve_value_function(mdp, opts.vi_tol)
    if method == "policy_iteration":
        return solve_policy_iteration(mdp)[0]
    raise ValueError(f"unknown method {method!r}")


def consistency_trace(
    smdp: Smdp,
    theta: float,
    selection: str = "greatest",
    opts: SolverOptions | None = None,
    fit_cache: dict | None = None,
    solve_cache: dict | None = None,
) -> ConsistencyTrace:
    """Solve under ``Q_theta`` (nearest node), select, stationarise, infer.

    ``fit_cache`` memoises best-fit results by the bytes of ``m``;
    ``solve_cache`` memoises subjective solutions by grid node for families
    without nuisance refitting.
    """
    opts = opts or SolverOptions()
    i = smdp.theta_grid.nearest(theta)
    n = smdp.theta_grid.points.size
    dirac = Belief.dirac(n, i)
    family = smdp.family
    prev = None
    for _ in range(max(opts.max_refits, 1)):
        if solve_cache is not None and family.refit is None and i in solve_cache:
            sub, v, pc = solve_cache[i]
        else:
            sub = smdp.subjective_mdp(dirac, family)
            v = solve_subjective(sub, opts)
            pc = optimal_policy_set(sub, v, opts.slack)
            if solve_cache is not None and family.refit is None:
                solve_cache[i] = (sub, v, pc)
        pol = _select(pc, selection, sub.n_actions)
        m = invariant_joint_distribution(smdp.mdp.kernel, pol)
        if family.refit is None:
            break
        acts = tuple(pol.action_indices)
        if acts == prev:
            break
        prev = acts
        family = smdp.family_for(m)
    if fit_cache is None:
        fit = best_fit(smdp, m, opts.fit_tol)
    else:
        key = m.mass.tobytes()
        if key not in fit_cache:
            fit_cache[key] = best_fit(smdp, m, opts.fit_tol)
        fit = fit_cache[key]
    return ConsistencyTrace(float(theta), i, selection, pc, v, pol, m, fit)


def consistency_map(
    smdp: Smdp, theta: float, selection: str = "greatest", opts: SolverOptions | None = None
) -> float:
    """Best-fit parameter of the stationary distribution induced at ``theta``.

    Returns ``nan`` when the best fit is set-valued (on-path data do not
    identify the parameter).
    """
    return consistency_trace(smdp, theta, selection, opts).theta_out


def _subjective_values(smdp: Smdp, belief: Belief, m: JointDistribution, tol: float):
    fam = smdp.family_for(m)
    sub = smdp.subjective_mdp(belief, fam)
    v = solve_value_function(sub, tol)
    return sub, v, bellman_rhs(sub, v)


def verify_equilibrium(smdp: Smdp, candidate: Equilibrium, tol: float = 1e-8) -> ResidualReport:
    """Recompute the three equilibrium residuals from scratch.

    Independent of the search: the subjective problem is re-solved to a
    tight tolerance, the full weighted-KL profile is enumerated, and the
    balance equation is evaluated directly.
    """
    m = candidate.m_star
    _, _, q = _subjective_values(smdp, candidate.mu_star, m, min(tol, 1e-10) * 1e-2)
    played = m.mass > 0
    shortfall = q.max(axis=1, keepdims=True) - q
    opt_gap = float(np.max(np.where(played, shortfall, 0.0)))
    profile = weighted_kl_profile(smdp, m)
    finite_min = np.min(profile)
    supp = candidate.mu_star.support
    excess = profile[supp] - finite_min
    inf_gap = float(np.max(excess)) if np.all(np.isfinite(excess)) else float("inf")
    stat_gap = stationarity_residual(m, smdp.mdp.kernel)
    return ResidualReport(max(opt_gap, 0.0), max(inf_gap, 0.0), stat_gap)


def _bisect(fun, lo: float, hi: float, f_lo: float, tol: float, max_iter: int = 200):
    """Plain bisection; returns ``(x, f(x))`` or ``None``.

    Stops at ``|f| <= tol`` or when the bracket collapses, in which case the
    midpoint is returned and left to the verifier (the fit is only accurate
    to the refinement tolerance, so ``tol`` may be unreachable).
    """
    for _ in range(max_iter):
        mid = 0.5 * (lo + hi)
        f_mid = fun(mid)
        if np.isnan(f_mid):
            return None
        if abs(f_mid) <= tol:
            return mid, f_mid
        if np.sign(f_mid) == np.sign(f_lo):
            lo, f_lo = mid, f_mid
        else:
            hi = mid
        if hi - lo <= 1e-13 * max(1.0, abs(lo)):
            return mid, f_mid
    return None


def _mixed_policy(pc: PolicyCorrespondence, alpha: float, n_actions: int) -> Policy:
    lo = least_selection(pc, n_actions).weights
    hi = greatest_selection(pc, n_actions).weights
    return Policy(alpha * lo + (1.0 - alpha) * hi)


def _build(smdp, trace_like, m, policy, theta_star, idx, opts, kind, selection, alpha=None):
    n = smdp.theta_grid.points.size
    mu = Belief.dirac(n, idx)
    cand = Equilibrium(
        m_star=m,
        mu_star=mu,
        theta_star=float(theta_star),
        policy=policy,
        value=trace_like.value,
        residuals=ResidualReport(0.0, 0.0, 0.0),
        kind=kind,
        selection=selection,
        mixing_weight=alpha,
        on_boundary=idx in (0, n - 1),
    )
    res = verify_equilibrium(smdp, cand, opts.verify_tol)
    return replace(cand, residuals=res)


@dataclass
class _Search:
    smdp: Smdp
    opts: SolverOptions
    cache: dict = field(default_factory=dict)
    fits: dict = field(default_factory=dict)
    solves: dict = field(default_factory=dict)

    def trace(self, i: int, selection: str) -> ConsistencyTrace:
        key = (i, selection)
        if key not in self.cache:
            theta = float(self.smdp.theta_grid.points[i])
            self.cache[key] = consistency_trace(
                self.smdp, theta, selection, self.opts, self.fits, self.solves
            )
        return self.cache[key]

    def h(self, theta: float, selection: str) -> float:
        tr = self.trace(self.smdp.theta_grid.nearest(theta), selection)
        return tr.theta_out - theta


def _pure_candidates(search: _Search, selection: str, nodes) -> list:
    smdp, opts = search.smdp, search.opts
    grid = smdp.theta_grid.points
    found = {}
    hs = []
    for i in nodes:
        try:
            tr = search.trace(i, selection)
        except AbsoluteContinuityError:
            hs.append(np.nan)
            continue
        hs.append(tr.theta_out - grid[i])
        if tr.tie and opts.include_unidentified and i in tr.fit.indices:
            found[i] = tr
        elif not tr.tie and i in tr.fit.indices:
            # node whose own refined fit sits in its best-fit set
            found[i] = tr
    hs = np.asarray(hs)
    for a, b, ha, hb in zip(nodes[:-1], nodes[1:], hs[:-1], hs[1:]):
        if np.isnan(ha) or np.isnan(hb) or np.sign(ha) == np.sign(hb) or ha == 0 or hb == 0:
            continue
        res = _bisect(lambda t: search.h(t, selection), grid[a], grid[b], ha, opts.root_tol)
        if res is not None:
            j = smdp.theta_grid.nearest(res[0])
            found.setdefault(j, search.trace(j, selection))
    out = []
    for i, tr in sorted(found.items()):
        theta_star = grid[i] if tr.tie else tr.theta_out
        eq = _build(smdp, tr, tr.m, tr.policy, theta_star, i, opts, "pure", selection)
        if eq.residuals.ok(opts.verify_tol):
            out.append(eq)
    return out


def _mixed_candidates(search: _Search, nodes) -> list:
    smdp, opts = search.smdp, search.opts
    grid = smdp.theta_grid.points
    S, X = smdp.mdp.n_states, smdp.mdp.n_actions
    out = []
    for i in nodes:
        tr = search.trace(i, "greatest")
        pc = tr.correspondence
        if pc.is_singleton:
            continue
        theta_hat = grid[i]

        def g(alpha):
            pol = _mixed_policy(pc, alpha, X)
            m = invariant_joint_distribution(smdp.mdp.kernel, pol)
            try:
                fit = best_fit(smdp, m, opts.fit_tol)
            except AbsoluteContinuityError:
                return np.nan
            return fit.theta - theta_hat

        alphas = np.linspace(0.0, 1.0, opts.mix_grid)
        vals = np.array([g(a) for a in alphas])
        for k in range(alphas.size - 1):
            a, b, fa, fb = alphas[k], alphas[k + 1], vals[k], vals[k + 1]
            if np.isnan(fa) or np.isnan(fb) or np.sign(fa) == np.sign(fb):
                continue
            if abs(fa) <= opts.root_tol:
                root = a
            elif abs(fb) <= opts.root_tol:
                root = b
            else:
                res = _bisect(g, a, b, fa, opts.root_tol * 1e-2)
                if res is None:
                    continue
                root = res[0]
            if root in (0.0, 1.0):
                continue  # pure selections are handled by the pure search
            pol = _mixed_policy(pc, root, X)
            m = invariant_joint_distribution(smdp.mdp.kernel, pol)
            eq = _build(smdp, tr, m, pol, theta_hat, i, opts, "mixed", "mixed", float(root))
            if eq.residuals.ok(opts.verify_tol):
                out.append(eq)
    return out


def solve_berk_nash(smdp: Smdp, opts: SolverOptions | None = None) -> list[Equilibrium]:
    """Find Berk-Nash equilibria with Dirac beliefs on the parameter grid.

    Returns every verified equilibrium found, sorted by ``theta_star`` and
    then by kind.

    Raises
    ------
    NoEquilibriumError
        If no candidate verifies.
    ValueError
        If ``opts.force`` is false and the model fails absolute continuity
        on the interior of the parameter grid.
    """
    opts = opts or SolverOptions()
    if not opts.force:
        rep = check_regularity(smdp)
        if not rep.interior_absolute_continuity_ok:
            raise ValueError("model family violates absolute continuity in the interior")
    n = smdp.theta_grid.points.size
    nodes = list(range(0, n, max(1, opts.scan_stride)))
    if nodes[-1] != n - 1:
        nodes.append(n - 1)
    search = _Search(smdp, opts)
    eqs = []
    for sel in SELECTIONS:
        eqs.extend(_pure_candidates(search, sel, nodes))
    eqs.extend(_mixed_candidates(search, nodes))
    unique = []
    for e in eqs:
        dup = any(
            abs(e.theta_star - u.theta_star) <= 1e-12
            and np.array_equal(e.policy.weights, u.policy.weights)
            for u in unique
        )
        if not dup:
            unique.append(e)
    if not unique:
        raise NoEquilibriumError(
            "no Berk-Nash equilibrium found on the parameter grid",
            {"scanned_nodes": len(nodes)},
        )
    unique.sort(key=lambda e: (e.theta_star, e.kind))
    return unique


@dataclass(frozen=True, eq=False)
class MapImage:
    """Image of ``(m, mu)`` under the equilibrium correspondence.

    ``distributions`` holds stationary distributions of optimal policies
    under the belief-weighted kernel: the least and greatest selections and,
    when the conditional policy of ``m`` is itself optimal, the distribution
    it induces. ``best_fit`` is the best-fit set of ``m``.
    """

    distributions: list
    labels: list
    best_fit: tuple

    def contains(self, m: JointDistribution, tol: float = 1e-8) -> bool:
        return any(np.max(np.abs(d.mass - m.mass)) <= tol for d in self.distributions)


def equilibrium_map_apply(
    smdp: Smdp, m: JointDistribution, mu: Belief, opts: SolverOptions | None = None
) -> MapImage:
    """Apply the equilibrium correspondence once."""
    opts = opts or SolverOptions()
    sub, v, q = _subjective_values(smdp, mu, m, opts.vi_tol)
    pc = optimal_policy_set(sub, v, opts.slack)
    X = sub.n_actions
    dists, labels = [], []
    for sel in SELECTIONS:
        pol = _select(pc, sel, X)
        dists.append(invariant_joint_distribution(smdp.mdp.kernel, pol))
        labels.append(sel)
    played = m.mass > 0
    # off the support of m, fall back to the greatest selection
    own_w = np.array(m.conditional_policy().weights)
    idle = m.state_marginal <= 0
    own_w[idle] = greatest_selection(pc, X).weights[idle]
    own = Policy(own_w)
    allowed = np.zeros_like(played)
    for s, acts in enumerate(pc.optimal_sets):
        allowed[s, list(acts)] = True
    if not np.any(played & ~allowed):
        dists.append(invariant_joint_distribution(smdp.mdp.kernel, own))
        labels.append("own")
    return MapImage(dists, labels, best_fit_set(smdp, m, opts.fit_tol))
