"""Subjective model families, KL machinery and best-fit inference.

A subjective MDP pairs a true MDP with a one-parameter family of transition
kernels the agent entertains. The agent's inferred parameter given a
state-action distribution ``m`` minimises the ``m``-weighted KL divergence
between true and model transition rows.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np
from scipy.optimize import brentq, minimize_scalar
from scipy.special import rel_entr, xlogy

from .mdp_core import Grid, JointDistribution, Kernel, Mdp, ROW_SUM_TOL, _frozen

__all__ = [
    "AbsoluteContinuityError",
    "Belief",
    "BestFit",
    "JointDistribution",
    "LikelihoodRatioReport",
    "ModelFamily",
    "MonotoneReport",
    "RegularityReport",
    "Smdp",
    "best_fit",
    "best_fit_set",
    "check_likelihood_ratio_property",
    "check_monotone_structure",
    "check_regularity",
    "kl_divergence",
    "lattice_shape",
    "mixture_kernel",
    "weighted_kl",
    "weighted_kl_profile",
]

MISSPEC_TOL = 1e-12
CACHE_ENTRIES = 20_000_000  # float64 kernel entries kept per family


class AbsoluteContinuityError(ValueError):
    """Every parameter assigns zero probability to some observed transition."""


@dataclass(frozen=True, eq=False)
class Belief:
    """Probability mass over the parameter grid."""

    mass: np.ndarray

    def __post_init__(self):
        b = np.asarray(self.mass, dtype=float).ravel()
        if np.any(b < 0) or abs(b.sum() - 1.0) > ROW_SUM_TOL:
            raise ValueError("belief must be nonnegative and sum to 1")
        object.__setattr__(self, "mass", _frozen(b))

    @classmethod
    def dirac(cls, n: int, index: int) -> "Belief":
        b = np.zeros(n)
        b[index] = 1.0
        return cls(b)

    @classmethod
    def uniform(cls, n: int) -> "Belief":
        return cls(np.full(n, 1.0 / n))

    @classmethod
    def normalized(cls, mass) -> "Belief":
        b = np.clip(np.asarray(mass, dtype=float), 0.0, None)
        return cls(b / b.sum())

    @property
    def support(self) -> np.ndarray:
        return np.flatnonzero(self.mass > 0)

    def mean(self, grid: Grid) -> float:
        return float(self.mass @ grid.points)

    def sd(self, grid: Grid) -> float:
        mu = self.mean(grid)
        return float(np.sqrt(max(self.mass @ (grid.points - mu) ** 2, 0.0)))


@dataclass(frozen=True, eq=False)
class ModelFamily:
    """Parameterised kernels ``Q_theta`` over a finite parameter grid.

    Supply either ``kernels`` (stacked ``[n_theta, S, X, S]``) or a
    ``kernel_fn`` mapping a real parameter to an ``(S, X, S)`` array. With
    ``kernel_fn`` the family is defined between grid nodes as well, which
    lets best-fit inference refine the grid argmin continuously.

    Parameters
    ----------
    theta_grid : Grid
    kernels : array_like, optional
    kernel_fn : callable, optional
    rows_fn : callable, optional
        ``rows_fn(thetas, states, actions) -> [len(thetas), R, S]`` returning
        only the requested transition rows; a fast path for large models.
    refit : callable, optional
        ``refit(m) -> ModelFamily``. Re-estimates nuisance parameters that are
        concentrated out of the family given data ``m`` (for example a
        regression intercept). Inference and equilibrium checks use the
        refitted family.
    """

    theta_grid: Grid
    kernels: np.ndarray | None = None
    kernel_fn: Callable[[float], np.ndarray] | None = None
    rows_fn: Callable | None = None
    refit: Callable | None = None
    _cache: dict = field(default_factory=dict, repr=False)

    def __post_init__(self):
        if self.kernels is None and self.kernel_fn is None:
            raise ValueError("model family needs kernels or kernel_fn")
        if self.kernels is not None:
            k = np.asarray(self.kernels, dtype=float)
            if k.ndim != 4 or k.shape[0] != len(self.theta_grid):
                raise ValueError("kernels must be stacked as [n_theta, S, X, S]")
            for i in range(k.shape[0]):
                Kernel(k[i])
            object.__setattr__(self, "kernels", _frozen(k))

    @property
    def n_theta(self) -> int:
        return len(self.theta_grid)

    @property
    def continuous(self) -> bool:
        return self.kernel_fn is not None

    def kernel(self, index: int) -> Kernel:
        """Kernel at grid node ``index`` (cached)."""
        index = int(index)
        if index in self._cache:
            return self._cache[index]
        if self.kernels is not None:
            k = Kernel(self.kernels[index])
        else:
            k = Kernel(self.kernel_fn(float(self.theta_grid.points[index])))
        if len(self._cache) >= max(1, CACHE_ENTRIES // k.probs.size):
            self._cache.pop(next(iter(self._cache)))  # oldest first
        self._cache[index] = k
        return k

    def kernel_at(self, theta: float) -> Kernel:
        """Kernel at an arbitrary parameter (nearest node if not continuous)."""
        if self.kernel_fn is None:
            return self.kernel(self.theta_grid.nearest(theta))
        return Kernel(self.kernel_fn(float(theta)))

    def stacked(self) -> np.ndarray:
        if self.kernels is not None:
            return self.kernels
        return np.stack([self.kernel(i).probs for i in range(self.n_theta)])

    def rows_at(self, thetas, states, actions) -> np.ndarray:
        """Transition rows ``[len(thetas), R, S]`` at arbitrary parameters."""
        thetas = np.atleast_1d(np.asarray(thetas, dtype=float))
        if self.rows_fn is not None:
            return np.asarray(self.rows_fn(thetas, states, actions), dtype=float)
        if self.kernel_fn is None:
            idx = [self.theta_grid.nearest(t) for t in thetas]
            return np.stack([self.kernel(i).probs[states, actions] for i in idx])
        return np.stack([np.asarray(self.kernel_fn(float(t)))[states, actions] for t in thetas])

    def rows(self, states, actions) -> np.ndarray:
        """Transition rows at every grid node, ``[n_theta, R, S]``."""
        if self.rows_fn is not None:
            return self.rows_at(self.theta_grid.points, states, actions)
        if self.kernels is not None:
            return self.kernels[:, states, actions]
        return np.stack([self.kernel(i).probs[states, actions] for i in range(self.n_theta)])


def _kernel_distances(family: ModelFamily, truth: np.ndarray, chunk: int = 256) -> np.ndarray:
    """Entrywise sup distance from ``truth`` to every family kernel."""
    S, X, _ = truth.shape
    if family.rows_fn is None:
        return np.array([np.max(np.abs(family.kernel(i).probs - truth)) for i in range(family.n_theta)])
    flat_s, flat_x = np.divmod(np.arange(S * X), X)
    dist = np.zeros(family.n_theta)
    for lo in range(0, S * X, chunk):
        s, x = flat_s[lo : lo + chunk], flat_x[lo : lo + chunk]
        d = np.abs(family.rows(s, x) - truth[s, x][None]).max(axis=(1, 2))
        dist = np.maximum(dist, d)
    return dist


@dataclass(frozen=True, eq=False)
class Smdp:
    """True MDP plus a subjective model family.

    ``misspecified`` is computed by entrywise comparison (tolerance
    ``1e-12``) of the true kernel with every family kernel; passing a value
    that disagrees raises ``ValueError``.
    """

    mdp: Mdp
    family: ModelFamily
    misspecified: bool | None = None
    name: str = ""
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        S, X = self.mdp.n_states, self.mdp.n_actions
        k0 = self.family.kernel(0).probs
        if k0.shape != (S, X, S):
            raise ValueError("family kernels do not match the MDP dimensions")
        contained = bool(np.any(_kernel_distances(self.family, self.mdp.kernel.probs) <= MISSPEC_TOL))
        if self.misspecified is not None and bool(self.misspecified) == contained:
            raise ValueError("misspecified flag disagrees with the family contents")
        object.__setattr__(self, "misspecified", not contained)

    @property
    def theta_grid(self) -> Grid:
        return self.family.theta_grid

    def family_for(self, m: JointDistribution | None) -> ModelFamily:
        """Family with nuisance parameters refitted to ``m`` when applicable."""
        if m is None or self.family.refit is None:
            return self.family
        return self.family.refit(m)

    def subjective_mdp(self, belief: Belief, family: ModelFamily | None = None) -> Mdp:
        """The MDP the agent solves under the belief-weighted kernel."""
        fam = self.family if family is None else family
        return self.mdp.with_kernel(mixture_kernel(fam, belief))


def mixture_kernel(family: ModelFamily, belief: Belief) -> Kernel:
    """Belief-weighted average of the family kernels."""
    w = belief.mass
    if w.size != family.n_theta:
        raise ValueError("belief and parameter grid sizes differ")
    support = np.flatnonzero(w > 0)
    if support.size == 1:
        return family.kernel(support[0])
    probs = sum(w[i] * family.kernel(i).probs for i in support)
    # absorb rounding drift only
    return Kernel(probs / probs.sum(axis=2, keepdims=True))


def kl_divergence(p, q) -> float | np.ndarray:
    """KL divergence ``sum p ln(p/q)`` over the last axis.

    Uses ``0 ln 0 = 0`` and returns ``inf`` when ``p > 0`` where ``q = 0``.
    """
    return rel_entr(np.asarray(p, dtype=float), np.asarray(q, dtype=float)).sum(axis=-1)


def _support(m: JointDistribution):
    s, x = np.nonzero(m.mass > 0)
    return s, x, m.mass[s, x]


def weighted_kl_profile(smdp: Smdp, m: JointDistribution, thetas=None) -> np.ndarray:
    """Weighted KL at every grid node (or at the given parameters)."""
    fam = smdp.family_for(m)
    s, x, w = _support(m)
    true_rows = smdp.mdp.kernel.probs[s, x]
    model_rows = fam.rows(s, x) if thetas is None else fam.rows_at(thetas, s, x)
    with np.errstate(divide="ignore", invalid="ignore"):
        kl = rel_entr(true_rows[None], model_rows).sum(axis=-1)
    return kl @ w


def weighted_kl(smdp: Smdp, theta_index: int, m: JointDistribution) -> float:
    """``sum_{s,x} m(s,x) KL(Q(.|s,x) || Q_theta(.|s,x))`` for one grid node."""
    fam = smdp.family_for(m)
    s, x, w = _support(m)
    kl = kl_divergence(smdp.mdp.kernel.probs[s, x], fam.kernel(theta_index).probs[s, x])
    return float(kl @ w)


def best_fit_set(smdp: Smdp, m: JointDistribution, tol: float = 1e-10) -> tuple[int, ...]:
    """Grid nodes whose weighted KL is within ``tol`` of the minimum.

    Raises
    ------
    AbsoluteContinuityError
        When the weighted KL is infinite at every node.
    """
    if tol <= 0:
        raise ValueError("tol must be positive")
    k = weighted_kl_profile(smdp, m)
    if not np.any(np.isfinite(k)):
        raise AbsoluteContinuityError("weighted KL is infinite for every parameter")
    return tuple(int(i) for i in np.flatnonzero(k <= np.min(k) + tol))


@dataclass(frozen=True)
class BestFit:
    """Best-fit inference for one distribution.

    ``theta`` refines the grid argmin to a real number; ``nan`` when the
    best-fit set is not a single node or adjacent pair (identification
    failure on this ``m``).
    """

    indices: tuple
    theta: float
    kl_min: float
    tie: bool


def _refine(smdp: Smdp, m: JointDistribution, profile: np.ndarray, i: int) -> float:
    grid = smdp.theta_grid.points
    n = grid.size
    if n == 1:
        return float(grid[0])
    lo, hi = grid[max(i - 1, 0)], grid[min(i + 1, n - 1)]
    fam = smdp.family_for(m)
    if fam.continuous:
        s, x, w = _support(m)
        true_rows = smdp.mdp.kernel.probs[s, x]

        def f(t):
            with np.errstate(divide="ignore", invalid="ignore"):
                rows = fam.rows_at([t], s, x)[0]
                return float(rel_entr(true_rows, rows).sum(axis=-1) @ w)

        step = 1e-6 * (hi - lo)

        def slope(t):
            return f(t + step) - f(t - step)

        a, b = lo + step, hi - step
        if np.isfinite(f(a)) and np.isfinite(f(b)):
            ga, gb = slope(a), slope(b)
            if ga < 0 < gb:
                return float(brentq(slope, a, b, xtol=1e-14, rtol=4 * np.finfo(float).eps))
        res = minimize_scalar(f, bounds=(lo, hi), method="bounded", options={"xatol": 1e-12})
        cand = [(f(lo), lo), (res.fun, res.x), (f(hi), hi)]
        return float(min(c for c in cand if np.isfinite(c[0]))[1])
    if 0 < i < n - 1 and np.all(np.isfinite(profile[i - 1 : i + 2])):
        x0, x1, x2 = grid[i - 1 : i + 2]
        y0, y1, y2 = profile[i - 1 : i + 2]
        denom = (x0 - x1) * (x0 - x2) * (x1 - x2)
        a = (x2 * (y1 - y0) + x1 * (y0 - y2) + x0 * (y2 - y1)) / denom
        b = (x2**2 * (y0 - y1) + x1**2 * (y2 - y0) + x0**2 * (y1 - y2)) / denom
        if a > 0:
            return float(np.clip(-b / (2 * a), x0, x2))
    return float(grid[i])


def best_fit(smdp: Smdp, m: JointDistribution, tol: float = 1e-10) -> BestFit:
    """Best-fit set plus a refined real-valued best-fit parameter.

    The refinement minimises the weighted KL between the neighbours of the
    grid argmin: continuously when the family defines kernels between
    nodes, otherwise through a local quadratic fit.
    """
    profile = weighted_kl_profile(smdp, m)
    if not np.any(np.isfinite(profile)):
        raise AbsoluteContinuityError("weighted KL is infinite for every parameter")
    kmin = float(np.min(profile))
    idx = tuple(int(i) for i in np.flatnonzero(profile <= kmin + tol))
    tie = len(idx) > 2 or (len(idx) == 2 and idx[1] - idx[0] != 1)
    if tie:
        return BestFit(idx, float("nan"), kmin, True)
    i = int(np.argmin(profile))
    return BestFit(idx, _refine(smdp, m, profile, i), kmin, False)


@dataclass(frozen=True)
class RegularityReport:
    """Finite-grid surrogates for the regularity conditions.

    ``dominated_pairs`` lists ``(theta, s, x, s_next)`` where the true kernel
    is positive but the model assigns zero probability.
    ``identification_failures`` names the probe distributions whose
    best-fit set is not a single node (ties within ``1e-12``).
    """

    absolute_continuity_ok: bool
    dominated_pairs: list
    max_density_ratio: float
    identification_ok: bool
    identification_failures: list
    interior_absolute_continuity_ok: bool

    def summary(self) -> dict:
        return {
            "absolute_continuity_ok": self.absolute_continuity_ok,
            "interior_absolute_continuity_ok": self.interior_absolute_continuity_ok,
            "n_dominated_pairs": len(self.dominated_pairs),
            "max_density_ratio": self.max_density_ratio,
            "identification_ok": self.identification_ok,
            "n_identification_failures": len(self.identification_failures),
        }


def check_regularity(smdp: Smdp, max_listed: int = 10_000) -> RegularityReport:
    """Absolute continuity, bounded density ratios and point identification.

    Identification is probed with every point mass on the state-action grid
    plus the uniform distribution.
    """
    truth = smdp.mdp.kernel.probs
    S, X, _ = truth.shape
    grid = smdp.theta_grid.points
    n = grid.size
    pos = truth > 0
    dominated = []
    bad_nodes = np.zeros(n, dtype=bool)
    ratio = 1.0
    fam = smdp.family
    for i in range(n):
        k = fam.kernel(i).probs
        viol = pos & (k == 0)
        if viol.any():
            bad_nodes[i] = True
            for s, x, t in zip(*np.nonzero(viol)):
                if len(dominated) < max_listed:
                    dominated.append((float(grid[i]), int(s), int(x), int(t)))
        ok = pos & (k > 0)
        if ok.any():
            ratio = max(ratio, float(np.max(truth[ok] / k[ok])))
    interior = not bad_nodes[1:-1].any() if n > 2 else not bad_nodes.any()

    failures = []
    probes = [("point", s, x) for s in range(S) for x in range(X)] + [("uniform",)]
    if fam.refit is None:
        # point masses share one profile computation per chunk of rows
        kl_rows = np.empty((n, S * X))
        flat_s, flat_x = np.divmod(np.arange(S * X), X)
        for lo in range(0, S * X, 256):
            sl = slice(lo, lo + 256)
            rows = fam.rows(flat_s[sl], flat_x[sl])
            with np.errstate(divide="ignore", invalid="ignore"):
                kl_rows[:, sl] = rel_entr(truth[flat_s[sl], flat_x[sl]][None], rows).sum(-1)
        profiles = [kl_rows[:, j] for j in range(S * X)] + [kl_rows.mean(axis=1)]
    else:
        profiles = []
        for p in probes:
            mass = np.full((S, X), 1.0 / (S * X))
            if p[0] == "point":
                mass = np.zeros((S, X))
                mass[p[1], p[2]] = 1.0
            profiles.append(weighted_kl_profile(smdp, JointDistribution(mass)))
    for p, prof in zip(probes, profiles):
        if not np.any(np.isfinite(prof)):
            failures.append(p)
            continue
        if np.count_nonzero(prof <= np.min(prof) + 1e-12) != 1:
            failures.append(p)
    return RegularityReport(
        absolute_continuity_ok=not dominated,
        dominated_pairs=dominated,
        max_density_ratio=ratio,
        identification_ok=not failures,
        identification_failures=failures,
        interior_absolute_continuity_ok=interior,
    )


def lattice_shape(states: Grid, actions: Grid) -> tuple[int, ...]:
    """Axis lengths when the state grid enumerates a product of chains.

    State coordinates must list the product in row-major order (last
    coordinate varying fastest). The action grid contributes the final axis.
    """
    c = states.coords
    dims = []
    for j in range(c.shape[1]):
        dims.append(np.unique(c[:, j]).size)
    if int(np.prod(dims)) != len(states):
        raise ValueError("state coordinates do not form a full product grid")
    expected = np.stack(
        np.meshgrid(*[np.unique(c[:, j]) for j in range(c.shape[1])], indexing="ij"), axis=-1
    ).reshape(-1, c.shape[1])
    if not np.allclose(expected, c):
        raise ValueError("state coordinates must be in row-major product order")
    return tuple(dims) + (len(actions),)


def _increasing_violations(t: np.ndarray, axes, tol: float) -> int:
    return int(sum(np.count_nonzero(np.diff(t, axis=a) < -tol) for a in axes))


def _supermodular_violations(t: np.ndarray, axes, tol: float) -> int:
    bad = 0
    for i, a in enumerate(axes):
        for b in axes[i + 1 :]:
            cross = np.diff(np.diff(t, axis=a), axis=b)
            bad += int(np.count_nonzero(cross < -tol))
    return bad


@dataclass(frozen=True)
class MonotoneReport:
    """Violation counts for the monotone-structure conditions.

    Conditions are checked on adjacent lattice cells, which is exact on a
    product of chains. Next-state upper sets are the quadrants
    ``{s' >= t}``; on a one-dimensional state grid these are all upper sets.
    """

    payoff_increasing_in_state: int
    payoff_supermodular: int
    kernel_stochastically_increasing: int
    kernel_stochastically_supermodular: int

    @property
    def passed(self) -> bool:
        return not any(
            (
                self.payoff_increasing_in_state,
                self.payoff_supermodular,
                self.kernel_stochastically_increasing,
                self.kernel_stochastically_supermodular,
            )
        )


def _upper_quadrant_masses(probs: np.ndarray, states: Grid) -> np.ndarray:
    """Mass of ``{s' >= t}`` for every threshold state ``t``: ``[..., T]``."""
    c = states.coords
    ge = np.all(c[None, :, :] >= c[:, None, :], axis=-1)  # [t, s']
    return probs @ ge.T.astype(float)


def check_monotone_structure(smdp: Smdp, tol: float = 1e-12) -> MonotoneReport:
    """Payoff monotonicity and supermodularity plus stochastic monotonicity
    and stochastic supermodularity of every family kernel.

    A payoff realised on transitions, ``u(s, x, s')``, is checked as a
    function on the lattice of current state, action and next state:
    increasing in both state arguments and supermodular in every pair of
    axes.
    """
    mdp = smdp.mdp
    shape = lattice_shape(mdp.states, mdp.actions)
    d = len(shape)
    state_axes = tuple(range(d - 1))
    if mdp.outcome_payoff is None:
        u = mdp.payoff.reshape(shape)
        inc = _increasing_violations(u, state_axes, tol)
        sup = _supermodular_violations(u, tuple(range(d)), tol)
    else:
        u = mdp.outcome_payoff.reshape(shape + shape[:-1])
        s_axes = state_axes + tuple(range(d, u.ndim))
        inc = _increasing_violations(u, s_axes, tol)
        sup = _supermodular_violations(u, tuple(range(u.ndim)), tol)
    k_inc = k_sup = 0
    for i in range(smdp.family.n_theta):
        tails = _upper_quadrant_masses(smdp.family.kernel(i).probs, mdp.states)
        t = tails.reshape(shape + (tails.shape[-1],))
        k_inc += _increasing_violations(t, tuple(range(d)), tol)
        k_sup += _supermodular_violations(t, tuple(range(d)), tol)
    return MonotoneReport(inc, sup, k_inc, k_sup)


@dataclass(frozen=True)
class LikelihoodRatioReport:
    """Monotonicity (and convexity) of expected log-likelihood ratios.

    For every pair of usable grid nodes ``theta1 < theta2`` the function
    ``E_Q[ln Q_theta2 - ln Q_theta1](s, x)`` is checked along the state axes
    and along the action axis separately. Nodes with an infinite expected
    log-likelihood are excluded and listed.
    """

    increasing_in_state: bool
    increasing_in_action: bool
    convex: bool | None
    excluded_thetas: list
    state_violations: int
    action_violations: int
    convexity_violations: int

    @property
    def passed(self) -> bool:
        ok = self.increasing_in_state and self.increasing_in_action
        return ok and (self.convex is not False)


def check_likelihood_ratio_property(
    smdp: Smdp, icx: bool = False, tol: float = 1e-10
) -> LikelihoodRatioReport:
    """Check the expected likelihood-ratio property on the parameter grid."""
    mdp = smdp.mdp
    shape = lattice_shape(mdp.states, mdp.actions)
    d = len(shape)
    truth = mdp.kernel.probs
    n = smdp.family.n_theta
    ell = np.empty((n,) + truth.shape[:2])
    for i in range(n):
        with np.errstate(divide="ignore"):
            ell[i] = xlogy(truth, smdp.family.kernel(i).probs).sum(axis=-1)
    usable = np.all(np.isfinite(ell.reshape(n, -1)), axis=1)
    excluded = [float(t) for t in smdp.theta_grid.points[~usable]]
    ell = ell[usable].reshape((-1,) + shape)
    st = act = cvx = 0
    for j in range(ell.shape[0] - 1):
        diff = ell[j + 1 :] - ell[j]
        st += sum(int(np.count_nonzero(np.diff(diff, axis=a + 1) < -tol)) for a in range(d - 1))
        act += int(np.count_nonzero(np.diff(diff, axis=d) < -tol))
        if icx:
            for a in range(d):
                if shape[a] >= 3:
                    cvx += int(np.count_nonzero(np.diff(diff, n=2, axis=a + 1) < -tol))
    return LikelihoodRatioReport(
        increasing_in_state=st == 0,
        increasing_in_action=act == 0,
        convex=(cvx == 0) if icx else None,
        excluded_thetas=excluded,
        state_violations=st,
        action_violations=act,
        convexity_violations=cvx,
    )
