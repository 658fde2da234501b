"""Built-in model instances and their closed-form oracles.

* Effort task: two outcomes, low/high effort, and an agent who believes
  low-effort success is state independent.
* AR(1) inference: mixture-normal innovations fitted by Gaussian AR(1)
  models; a single dummy action.
* Savings: log utility with a preference shock correlated with the
  productivity shock that the agent's wealth model ignores.
"""

from __future__ import annotations

import warnings
from dataclasses import asdict, dataclass, field

import numpy as np
from scipy.signal import lfilter
from scipy.stats import norm

from .equilibrium import Equilibrium, ResidualReport, SolverOptions, verify_equilibrium
from .mdp_core import (
    Grid,
    JointDistribution,
    Kernel,
    Mdp,
    Policy,
    solve_value_function,
)
from .smdp_models import Belief, ModelFamily, Smdp

__all__ = [
    "Ar1Spec",
    "EffortTaskSpec",
    "GENERATORS",
    "SavingsSpec",
    "ar1_statewise_best_fit",
    "build",
    "build_ar1",
    "build_effort_task",
    "build_savings",
    "effort_task_closed_form",
    "savings_boundary_mass",
    "savings_consistency_fixed_point",
    "savings_consistency_rhs",
    "savings_fraction",
]


def _grid_including(lo: float, hi: float, n: int, value: float | None) -> np.ndarray:
    pts = np.linspace(lo, hi, n)
    if value is None or not lo <= value <= hi:
        return pts
    k = int(np.argmin(np.abs(pts - value)))
    if abs(pts[k] - value) <= 1e-9:
        pts[k] = value
        return pts
    return np.sort(np.append(pts, value))


# ---------------------------------------------------------------- effort task


@dataclass(frozen=True)
class EffortTaskSpec:
    """Effort-provision primitives.

    Actions are ordered low (index 0) below high (index 1). The parameter
    grid spans ``[theta_lower, theta_upper]`` and always contains the
    indifference value ``1 - c`` when it lies in that range.
    """

    c: float
    q0: float
    q1: float
    discount: float = 0.9
    theta_points: int = 201
    theta_lower: float = 0.0
    theta_upper: float = 1.0

    def __post_init__(self):
        if not 0 < self.q0 < 1 - self.c < self.q1 < 1:
            raise ValueError("effort task needs 0 < q0 < 1 - c < q1 < 1")
        if not 0 < self.discount < 1:
            raise ValueError("discount must lie in (0, 1)")
        if not 0 <= self.theta_lower < self.theta_upper <= 1:
            raise ValueError("parameter bounds must satisfy 0 <= lower < upper <= 1")

    @property
    def feasible(self) -> bool:
        """Whether the mixed-equilibrium weight lies in ``[0, 1]``."""
        return self.q1 - (1 - self.c) <= self.c * (self.q1 - self.q0) + 1e-15

    @property
    def theta_star(self) -> float:
        return 1.0 - self.c

    @property
    def low_effort_weight(self) -> float:
        return (self.q1 - (1 - self.c)) / (self.c * (self.q1 - self.q0))

    @property
    def success_share(self) -> float:
        """Stationary probability of the success state at equilibrium."""
        return (1 - self.c - self.q0) / (self.q1 - self.q0)


def _effort_kernel(theta: float) -> np.ndarray:
    k = np.empty((2, 2, 2))
    k[:, 0] = [1.0 - theta, theta]
    k[:, 1] = [0.0, 1.0]
    return k


def build_effort_task(spec: EffortTaskSpec) -> Smdp:
    """Two-state, two-action subjective MDP of the effort task."""
    truth = np.empty((2, 2, 2))
    truth[0, 0] = [1 - spec.q0, spec.q0]
    truth[1, 0] = [1 - spec.q1, spec.q1]
    truth[:, 1] = [0.0, 1.0]
    s_next = np.array([0.0, 1.0])
    effort_cost = np.array([0.0, spec.c])
    outcome = s_next[None, None, :] - effort_cost[None, :, None] + np.zeros((2, 2, 2))
    mdp = Mdp(
        states=Grid([0.0, 1.0], "outcome"),
        actions=Grid([0.0, 1.0], "effort (0=low, 1=high)"),
        kernel=Kernel(truth),
        payoff=None,
        discount=spec.discount,
        outcome_payoff=outcome,
    )
    pts = _grid_including(spec.theta_lower, spec.theta_upper, spec.theta_points, spec.theta_star)
    family = ModelFamily(Grid(pts, "ability"), kernel_fn=_effort_kernel)
    return Smdp(mdp, family, name="effort_task", meta={"spec": asdict(spec)})


def effort_task_closed_form(spec: EffortTaskSpec, tol: float = 1e-8) -> Equilibrium:
    """Closed-form mixed equilibrium, with residuals from the verifier.

    Raises
    ------
    ValueError
        If the mixing weight falls outside ``[0, 1]``.
    """
    if not spec.feasible:
        raise ValueError("parameterisation admits no state-independent mixed equilibrium")
    smdp = build_effort_task(spec)
    a, ms1 = spec.low_effort_weight, spec.success_share
    w = np.array([[a, 1 - a], [a, 1 - a]])
    m = JointDistribution(np.array([1 - ms1, ms1])[:, None] * w)
    i = smdp.theta_grid.nearest(spec.theta_star)
    mu = Belief.dirac(smdp.family.n_theta, i)
    v = solve_value_function(smdp.subjective_mdp(mu), 1e-12)
    eq = Equilibrium(m, mu, spec.theta_star, Policy(w), v, ResidualReport(0, 0, 0), "mixed", "mixed", a)
    return Equilibrium(
        m, mu, spec.theta_star, Policy(w), v, verify_equilibrium(smdp, eq, tol), "mixed", "mixed", a
    )


# ---------------------------------------------------------------------- AR(1)


@dataclass(frozen=True)
class Ar1Spec:
    """AR(1) with two-component mixture-normal innovations.

    The state grid has ``grid_points`` equally spaced nodes covering
    ``truncation`` unconditional standard deviations either side of the
    unconditional mean; the outer cells absorb the tails.
    """

    rho: float
    mu1: float = -0.5
    mu2: float = 0.5
    sigma: float = 1.0
    grid_points: int = 201
    truncation: float = 4.0
    theta_points: int = 201
    theta_lower: float = -0.99
    theta_upper: float = 0.99
    discount: float = 0.9

    def __post_init__(self):
        if not 0 < abs(self.rho) < 1:
            raise ValueError("need 0 < |rho| < 1")
        if self.sigma <= 0 or self.grid_points < 21 or self.truncation <= 0:
            raise ValueError("need sigma > 0, grid_points >= 21 and truncation > 0")

    @property
    def innovation_mean(self) -> float:
        return 0.5 * (self.mu1 + self.mu2)

    @property
    def innovation_var(self) -> float:
        return self.sigma**2 + (0.5 * (self.mu1 - self.mu2)) ** 2

    def state_points(self) -> np.ndarray:
        centre = self.innovation_mean / (1 - self.rho)
        sd = np.sqrt(self.innovation_var / (1 - self.rho**2))
        return np.linspace(centre - self.truncation * sd, centre + self.truncation * sd, self.grid_points)


def _cell_probs(means: np.ndarray, edges: np.ndarray, sd: float) -> np.ndarray:
    """Normal cell probabilities over ``edges`` (outer edges infinite).

    Cells above the mean are differenced in the upper tail so that small
    probabilities do not cancel to zero.
    """
    zs = (edges - means[..., None]) / sd
    lower = np.diff(norm.cdf(zs), axis=-1)
    upper = -np.diff(norm.sf(zs), axis=-1)
    mid = 0.5 * (zs[..., 1:] + zs[..., :-1])
    left_open = np.isneginf(zs[..., :-1])
    right_open = np.isposinf(zs[..., 1:])
    use_upper = (mid > 0) | right_open
    return np.where(use_upper & ~left_open, upper, lower)


def build_ar1(spec: Ar1Spec) -> Smdp:
    """Single-action subjective MDP for the AR(1) inference problem."""
    pts = spec.state_points()
    edges = np.concatenate(([-np.inf], 0.5 * (pts[1:] + pts[:-1]), [np.inf]))
    true_rows = 0.5 * _cell_probs(spec.rho * pts + spec.mu1, edges, spec.sigma)
    true_rows += 0.5 * _cell_probs(spec.rho * pts + spec.mu2, edges, spec.sigma)
    truth = Kernel.normalized(true_rows[:, None, :])
    mdp = Mdp(Grid(pts, "state"), Grid([0.0], "none"), truth, np.zeros((pts.size, 1)), spec.discount)

    def rows_fn(thetas, states, actions):
        p = _cell_probs(np.outer(thetas, pts[states]), edges, spec.sigma)
        return p / p.sum(axis=-1, keepdims=True)

    def kernel_fn(theta):
        p = _cell_probs(theta * pts, edges, spec.sigma)
        return (p / p.sum(axis=-1, keepdims=True))[:, None, :]

    theta = Grid(np.linspace(spec.theta_lower, spec.theta_upper, spec.theta_points), "persistence")
    family = ModelFamily(theta, kernel_fn=kernel_fn, rows_fn=rows_fn)
    return Smdp(mdp, family, name="ar1", meta={"spec": asdict(spec)})


def ar1_statewise_best_fit(smdp: Smdp, state_index: int) -> float:
    """Least-squares persistence at one state, ``E[s' s | s] / s^2``.

    At ``s = 0`` the ratio is undefined; a warning is issued and the grid
    argmin of the KL divergence at that state is returned instead.
    """
    s = float(smdp.mdp.states.points[state_index])
    row = smdp.mdp.kernel.probs[state_index, 0]
    if s == 0.0:
        warnings.warn("statewise fit is degenerate at s = 0; returning KL grid argmin", stacklevel=2)
        mass = np.zeros((smdp.mdp.n_states, 1))
        mass[state_index, 0] = 1.0
        from .smdp_models import weighted_kl_profile

        prof = weighted_kl_profile(smdp, JointDistribution(mass))
        return float(smdp.theta_grid.points[int(np.argmin(prof))])
    return float(row @ smdp.mdp.states.points) / s


# -------------------------------------------------------------------- savings


def savings_fraction(beta, z, delta: float, mean_z: float = 0.5):
    """Savings share ``A_z(beta)`` of the log-utility agent."""
    db = delta * np.asarray(beta, dtype=float)
    return mean_z * db / ((1 - db) * np.asarray(z, dtype=float) + mean_z * db)


@dataclass(frozen=True)
class SavingsSpec:
    """Savings primitives and discretisation.

    Grids default to ``None`` and are then generated: a log-wealth grid of
    ``wealth_points`` nodes spanning ``wealth_halfwidth`` stationary
    standard deviations around the stationary mean of log wealth under the
    correctly specified policy; ``z_points`` cell midpoints of ``[0, 1]``;
    and ``fraction_points`` savings shares in ``[0.04, 0.96]``.
    """

    alpha_star: float = 0.0
    beta_star: float = 0.5
    gamma_star: float = 1.0
    delta: float = 0.9
    wealth_points: int = 40
    wealth_halfwidth: float = 5.0
    z_points: int = 5
    fraction_points: int = 47
    theta_points: int = 61
    theta_lower: float = 0.02
    theta_upper: float = 0.98
    consumption_floor: float = 1e-8
    log_wealth_grid: tuple | None = None
    z_grid: tuple | None = None
    savings_fractions: tuple | None = None

    def __post_init__(self):
        if not 0 < self.beta_star < 1:
            raise ValueError("need 0 < beta_star < 1")
        if self.gamma_star < 0:
            raise ValueError("need gamma_star >= 0")
        if not 0 < self.delta < 1:
            raise ValueError("need 0 < delta < 1")
        if not 0 < self.theta_lower < self.theta_upper < 1:
            raise ValueError("need 0 < theta_lower < theta_upper < 1")

    def grids(self) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        z = (
            np.asarray(self.z_grid, float)
            if self.z_grid is not None
            else (np.arange(self.z_points) + 0.5) / self.z_points
        )
        f = (
            np.asarray(self.savings_fractions, float)
            if self.savings_fractions is not None
            else np.linspace(0.04, 0.96, self.fraction_points)
        )
        if self.log_wealth_grid is not None:
            return np.asarray(self.log_wealth_grid, float), z, f
        zz = np.linspace(0.0005, 0.9995, 1000)
        log_a = np.log(savings_fraction(self.beta_star, zz, self.delta))
        b, g = self.beta_star, self.gamma_star
        mean = (self.alpha_star + b * log_a.mean() + g * 0.5) / (1 - b)
        var = (b**2 * log_a.var() + g**2 / 12 + 1 + 2 * b * g * np.cov(zz, log_a)[0, 1]) / (1 - b**2)
        half = self.wealth_halfwidth * np.sqrt(var)
        return np.linspace(mean - half, mean + half, self.wealth_points), z, f


def build_savings(spec: SavingsSpec) -> Smdp:
    """Discretised savings problem.

    State index ``i * nz + k`` is (log-wealth node ``i``, shock node ``k``);
    actions are savings shares. Next-period log wealth is normal with unit
    variance, integrated over cells whose outer cells absorb the tails; the
    next shock is uniform over its nodes. Models set the log-wealth mean to
    ``a(beta) + beta * ln x``, where the intercept ``a(beta)`` is profiled
    out: each data distribution ``m`` gets the Gaussian maximum-likelihood
    intercept ``E_m[true mean - beta ln x]``.
    """
    ly, z, f = spec.grids()
    nw, nz, nx = ly.size, z.size, f.size
    edges = np.concatenate(([-np.inf], 0.5 * (ly[1:] + ly[:-1]), [np.inf]))
    coords = np.stack(np.meshgrid(ly, z, indexing="ij"), axis=-1).reshape(-1, 2)
    states = Grid(np.arange(nw * nz, dtype=float), "wealth x shock", coords=coords)
    actions = Grid(f, "savings share")
    log_x = np.log(f)[None, :] + ly[:, None]  # [wealth, share]
    log_x_state = np.repeat(log_x, nz, axis=0)  # [state, share]
    z_state = np.tile(z, nw)

    def expand(py):  # [..., nw] -> [..., nw * nz]
        return np.repeat(py / nz, nz, axis=-1)

    true_mean = spec.alpha_star + spec.beta_star * log_x_state + spec.gamma_star * z_state[:, None]
    truth = Kernel.normalized(expand(_cell_probs(true_mean, edges, 1.0)))
    wealth = np.exp(ly)
    cons = np.maximum(np.repeat(wealth, nz)[:, None] * (1 - f)[None, :], spec.consumption_floor)
    payoff = z_state[:, None] * np.log(cons)
    mdp = Mdp(states, actions, truth, payoff, spec.delta)

    def make_family(mean_true: float, mean_log_x: float) -> ModelFamily:
        def intercept(beta):
            return mean_true - beta * mean_log_x

        def kernel_fn(beta):
            mean = intercept(beta) + beta * log_x_state
            return expand(_cell_probs(mean, edges, 1.0))

        def rows_fn(betas, s_idx, x_idx):
            betas = np.asarray(betas, float)[:, None]
            mean = intercept(betas) + betas * log_x_state[s_idx, x_idx][None, :]
            return expand(_cell_probs(mean, edges, 1.0))

        def refit(m: JointDistribution) -> ModelFamily:
            w = m.mass
            return make_family(float(np.sum(w * true_mean)), float(np.sum(w * log_x_state)))

        theta = Grid(np.linspace(spec.theta_lower, spec.theta_upper, spec.theta_points), "return")
        return ModelFamily(theta, kernel_fn=kernel_fn, rows_fn=rows_fn, refit=refit)

    # reference intercept: uniform weights over states at the correct policy share
    ref_share = savings_fraction(spec.beta_star, z_state, spec.delta)
    ref_log_x = np.log(ref_share) + np.repeat(ly, nz)
    ref_true = spec.alpha_star + spec.beta_star * ref_log_x + spec.gamma_star * z_state
    family = make_family(float(ref_true.mean()), float(ref_log_x.mean()))
    return Smdp(mdp, family, name="savings", meta={"spec": asdict(spec)})


def savings_boundary_mass(smdp: Smdp, m: JointDistribution) -> float:
    """Stationary mass on the lowest and highest log-wealth nodes."""
    nz = np.unique(smdp.mdp.states.coords[:, 1]).size
    ms = m.state_marginal.reshape(-1, nz).sum(axis=1)
    return float(ms[0] + ms[-1])


def savings_consistency_rhs(
    beta: float, spec: SavingsSpec, n_draws: int = 1_000_000, seed: int = 20240611
) -> float:
    """Right-hand side of the savings consistency condition.

    ``beta_star + gamma_star * Cov(z, ln A_z) / (Var(ln A_z) + Var(ln y))``
    with moments from a simulated stationary path of the true wealth process
    under shares ``A_z(beta)``. The seed is fixed so the map is a
    deterministic function of ``beta``.
    """
    if not 0 < beta < 1:
        raise ValueError("need 0 < beta < 1")
    rng = np.random.Generator(np.random.PCG64(seed))
    burn = 2_000
    z = rng.uniform(size=n_draws + burn)
    xi = rng.standard_normal(n_draws + burn)
    log_a = np.log(savings_fraction(beta, z, spec.delta))
    b = spec.beta_star
    shock = spec.alpha_star + b * log_a + spec.gamma_star * z + xi
    # log y_{t+1} = b log y_t + shock_t
    log_y = lfilter([0.0, 1.0], [1.0, -b], shock)
    z, log_a, log_y = z[burn:], log_a[burn:], log_y[burn:]
    cov = np.cov(z, log_a)[0, 1]
    return float(b + spec.gamma_star * cov / (log_a.var(ddof=1) + log_y.var(ddof=1)))


def savings_consistency_fixed_point(
    spec: SavingsSpec,
    n_draws: int = 1_000_000,
    seed: int = 20240611,
    tol: float = 1e-8,
    bounds: tuple = (1e-3, 0.999),
) -> float:
    """Bisection root of ``rhs(beta) - beta`` on ``bounds``."""
    lo, hi = bounds
    f_lo = savings_consistency_rhs(lo, spec, n_draws, seed) - lo
    f_hi = savings_consistency_rhs(hi, spec, n_draws, seed) - hi
    if np.sign(f_lo) == np.sign(f_hi):
        raise ValueError("consistency map has no sign change on the bracket")
    while hi - lo > tol:
        mid = 0.5 * (lo + hi)
        f_mid = savings_consistency_rhs(mid, spec, n_draws, seed) - mid
        if f_mid == 0:
            return mid
        if np.sign(f_mid) == np.sign(f_lo):
            lo, f_lo = mid, f_mid
        else:
            hi = mid
    return 0.5 * (lo + hi)


# ------------------------------------------------------------------ registry

GENERATORS = {
    "effort_task": (EffortTaskSpec, build_effort_task),
    "ar1": (Ar1Spec, build_ar1),
    "savings": (SavingsSpec, build_savings),
}


def build(name: str, **params) -> Smdp:
    """Build a named example from keyword parameters."""
    try:
        spec_cls, builder = GENERATORS[name]
    except KeyError:
        raise ValueError(f"unknown generator {name!r}; choose from {sorted(GENERATORS)}") from None
    return builder(spec_cls(**params))
