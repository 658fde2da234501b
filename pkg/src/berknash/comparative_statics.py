"""Stochastic-order checkers, shock classification and parameter sweeps.

Orders are on finite sets of points carrying coordinates; a point ``a`` is
below ``b`` when every coordinate of ``a`` is at most that of ``b``.
"""

from __future__ import annotations

import csv
import io
import math
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .equilibrium import Equilibrium, NoEquilibriumError, SolverOptions, solve_berk_nash, solve_subjective
from .mdp_core import Grid, JointDistribution, Kernel, optimal_policy_set
from .smdp_models import Belief, Smdp, mixture_kernel

__all__ = [
    "ENUMERATION_LIMIT",
    "OrderVerdict",
    "PairVerdict",
    "ShockSpec",
    "SweepRecord",
    "SweepResult",
    "SWEEP_COLUMNS",
    "check_fosd",
    "check_fosd_marginal",
    "check_icx",
    "check_icx_marginal",
    "check_strong_set_order",
    "joint_coords",
    "policy_sets",
    "sweep",
    "verify_positive_shock",
]

ENUMERATION_LIMIT = 20
ORDER_TOL = 1e-12
THETA_TOL = 1e-9
SWEEP_COLUMNS = (
    "primitive",
    "theta_least",
    "theta_greatest",
    "mS_mean",
    "fosd_vs_prev",
    "icx_vs_prev",
    "shock_class",
    "solver_status",
)
SHOCK_TARGETS = ("payoff", "discount", "true_kernel", "model_family", "theta_bounds")


@dataclass(frozen=True)
class OrderVerdict:
    """Outcome of a dominance check; truthy when dominance holds.

    ``worst`` is the smallest ``E2 f - E1 f`` over the tested functions.
    ``approximate`` marks checks run on a sufficient family of test
    functions (quadrants or hinges) rather than the full characterisation.
    """

    holds: bool
    approximate: bool
    worst: float
    method: str

    def __bool__(self) -> bool:
        return self.holds


def joint_coords(states: Grid, actions: Grid) -> np.ndarray:
    """Coordinates of the state-action product, row-major ``(s, x)``."""
    S, X = len(states), len(actions)
    sc = np.repeat(states.coords, X, axis=0)
    ac = np.tile(actions.points, S)[:, None]
    return np.hstack([sc, ac])


def _index_coords(shape) -> np.ndarray:
    return np.stack(np.meshgrid(*[np.arange(n) for n in shape], indexing="ij"), -1).reshape(
        -1, len(shape)
    ).astype(float)


def _merge_ties(coords: np.ndarray, d: np.ndarray):
    uniq, inv = np.unique(coords, axis=0, return_inverse=True)
    return uniq, np.bincount(inv.ravel(), weights=d, minlength=uniq.shape[0])


def _min_upper_set_mass(coords: np.ndarray, d: np.ndarray) -> float:
    """Minimum of ``d(U)`` over all upper sets ``U``, by enumeration."""
    coords, d = _merge_ties(coords, d)
    n = coords.shape[0]
    order = np.argsort(-coords.sum(axis=1), kind="stable")
    pos = np.empty(n, dtype=int)
    pos[order] = np.arange(n)
    masks = np.zeros(1, dtype=np.int64)
    sums = np.zeros(1)
    for i in order:
        above = np.all(coords >= coords[i], axis=1)
        above[i] = False
        req = 0
        for j in np.flatnonzero(above):
            req |= 1 << int(pos[j])
        can = (masks & req) == req
        masks = np.concatenate([masks, masks[can] | (1 << int(pos[i]))])
        sums = np.concatenate([sums, sums[can] + d[i]])
    return float(sums.min())


def _min_quadrant_mass(coords: np.ndarray, d: np.ndarray, chunk: int = 2048) -> float:
    worst = 0.0
    for a in range(0, coords.shape[0], chunk):
        ge = np.all(coords[None, :, :] >= coords[a : a + chunk, None, :], axis=-1)
        worst = min(worst, float((ge @ d).min()))
    return worst


def _fosd(p1: np.ndarray, p2: np.ndarray, coords: np.ndarray, tol: float) -> OrderVerdict:
    d = np.asarray(p2, float).ravel() - np.asarray(p1, float).ravel()
    if coords.shape[0] != d.size:
        raise ValueError("coordinates must have one row per mass point")
    chain = coords.shape[1] == 1
    if chain:
        o = np.argsort(coords[:, 0], kind="stable")
        tails = np.cumsum(d[o][::-1])
        worst, approx, method = min(0.0, float(tails.min())), False, "tails"
    elif coords.shape[0] <= ENUMERATION_LIMIT:
        worst, approx, method = _min_upper_set_mass(coords, d), False, "upper-sets"
    else:
        worst, approx, method = _min_quadrant_mass(coords, d), True, "quadrants"
    return OrderVerdict(worst >= -tol, approx, worst, method)


def check_fosd(
    m1: JointDistribution, m2: JointDistribution, coords=None, tol: float = ORDER_TOL
) -> OrderVerdict:
    """Whether ``m2`` dominates ``m1`` in the usual stochastic order.

    Checks ``m2(U) >= m1(U) - tol`` over upper sets of the componentwise
    order: exactly on chains and on at most 20 points, and over quadrant
    upper sets ``{z >= z0}`` otherwise (flagged approximate).

    Parameters
    ----------
    coords : array_like, optional
        ``(S * X, d)`` point coordinates, for instance from
        :func:`joint_coords`; defaults to the index lattice ``(s, x)``.
    """
    c = _index_coords(m1.mass.shape) if coords is None else np.asarray(coords, float)
    return _fosd(m1.mass, m2.mass, c.reshape(c.shape[0], -1), tol)


def check_fosd_marginal(p1, p2, coords, tol: float = ORDER_TOL) -> OrderVerdict:
    """Usual stochastic order for vectors of mass on points ``coords``."""
    c = np.asarray(coords, float)
    return _fosd(np.asarray(p1), np.asarray(p2), c.reshape(c.shape[0], -1), tol)


def _icx(p1, p2, coords: np.ndarray, tol: float, levels: int = 10) -> OrderVerdict:
    d = np.asarray(p2, float).ravel() - np.asarray(p1, float).ravel()
    if coords.shape[1] == 1:
        xi = coords[:, 0]
        knots = np.unique(xi)
        stop_loss = np.maximum(xi[None, :] - knots[:, None], 0.0) @ d
        worst = min(0.0, float(stop_loss.min()))
        return OrderVerdict(worst >= -tol, False, worst, "stop-loss")
    lo, hi = coords.min(axis=0), coords.max(axis=0)
    z = (coords - lo) / np.where(hi > lo, hi - lo, 1.0)
    axes = [np.linspace(0.0, 1.0, levels)] * z.shape[1]
    w = np.stack(np.meshgrid(*axes, indexing="ij"), -1).reshape(-1, z.shape[1])[1:]
    proj = w @ z.T  # [weights, points]
    worst = 0.0
    for k in range(levels):
        c = proj.max(axis=1, keepdims=True) * k / levels
        worst = min(worst, float((np.maximum(proj - c, 0.0) @ d).min()))
    return OrderVerdict(worst >= -tol, True, worst, "hinges")


def check_icx(
    m1: JointDistribution, m2: JointDistribution, coords=None, tol: float = ORDER_TOL
) -> OrderVerdict:
    """Whether ``m2`` dominates ``m1`` in the increasing convex order.

    One-dimensional coordinates use the exact stop-loss comparison. Otherwise
    hinge functions ``max(0, w . z - c)`` with ``w >= 0`` on a 10-level
    lattice and 10 thresholds are tested and the verdict is flagged
    approximate. Coordinates are rescaled to the unit box first.
    """
    c = _index_coords(m1.mass.shape) if coords is None else np.asarray(coords, float)
    return _icx(m1.mass, m2.mass, c.reshape(c.shape[0], -1), tol)


def check_icx_marginal(p1, p2, coords, tol: float = ORDER_TOL) -> OrderVerdict:
    """Increasing convex order for vectors of mass on points ``coords``."""
    c = np.asarray(coords, float)
    return _icx(p1, p2, c.reshape(c.shape[0], -1), tol)


def _member(v: float, s: np.ndarray) -> bool:
    return bool(np.any(np.abs(s - v) <= 1e-12 * max(1.0, abs(v))))


def check_strong_set_order(set1: Sequence[float], set2: Sequence[float]) -> bool:
    """True iff ``set2`` dominates ``set1``: for all ``a`` in ``set1`` and
    ``b`` in ``set2``, ``max(a, b)`` is in ``set2`` and ``min(a, b)`` in
    ``set1``."""
    a = np.unique(np.asarray(set1, float))
    b = np.unique(np.asarray(set2, float))
    if a.size == 0 or b.size == 0:
        return True
    # only pairs with a > b can fail
    for x in a:
        for y in b[b < x]:
            if not (_member(x, b) and _member(y, a)):
                return False
    return True


def policy_sets(smdp: Smdp, kernel: Kernel, opts: SolverOptions) -> list:
    """Optimal action values per state under a subjective kernel."""
    mdp = smdp.mdp.with_kernel(kernel)
    v = solve_subjective(mdp, opts)
    pc = optimal_policy_set(mdp, v.values, opts.slack)
    pts = smdp.mdp.actions.points
    return [pts[list(s)] for s in pc.optimal_sets]


def _probe_kernels(smdp: Smdp, thetas, include_uniform: bool):
    fam = smdp.family
    out = []
    for t in thetas:
        if fam.continuous:
            out.append(fam.kernel_at(t))
        else:
            out.append(fam.kernel(fam.theta_grid.nearest(t)))
    if include_uniform:
        out.append(mixture_kernel(fam, Belief.uniform(fam.n_theta)))
    return out


def verify_positive_shock(
    smdp1: Smdp,
    smdp2: Smdp,
    probes: Sequence[Belief] | None = None,
    opts: SolverOptions | None = None,
    stride: int = 1,
) -> str:
    """Classify the move from ``smdp1`` to ``smdp2``.

    Returns ``"positive"`` when the optimal action sets rise in the strong
    set order at every state and probe belief, ``"negative"`` when they
    fall, and ``"neither"`` otherwise. Identical sets count as positive.

    Parameters
    ----------
    probes : list of Belief, optional
        Beliefs on the (shared) parameter grid. Defaults to point masses at
        every grid node (every ``stride``-th) plus the uniform belief. When
        the two grids differ and both families are continuous, point masses
        at the union of grid nodes are used instead.
    """
    opts = opts or SolverOptions()
    g1, g2 = smdp1.theta_grid.points, smdp2.theta_grid.points
    if probes is not None:
        k1 = [mixture_kernel(smdp1.family, b) for b in probes]
        k2 = [mixture_kernel(smdp2.family, b) for b in probes]
    else:
        same = g1.size == g2.size and np.allclose(g1, g2, rtol=0, atol=1e-12)
        if same:
            thetas = g1[::stride]
        elif smdp1.family.continuous and smdp2.family.continuous:
            thetas = np.union1d(g1, g2)[::stride]
        else:
            raise ValueError("parameter grids differ and the families cannot be evaluated off-grid")
        k1 = _probe_kernels(smdp1, thetas, True)
        k2 = _probe_kernels(smdp2, thetas, True)
    up = down = True
    identical = True
    for a, b in zip(k1, k2):
        s1, s2 = policy_sets(smdp1, a, opts), policy_sets(smdp2, b, opts)
        for x, y in zip(s1, s2):
            if x.size != y.size or not np.allclose(x, y):
                identical = False
            up = up and check_strong_set_order(x, y)
            down = down and check_strong_set_order(y, x)
        if not (up or down):
            return "neither"
    if up and down:
        return "positive" if identical else "neither"
    return "positive" if up else "negative"


@dataclass(frozen=True)
class ShockSpec:
    """A primitive to vary and its strictly monotone values.

    ``param`` names the builder argument; ``target`` is the primitive
    category (payoff, discount, true_kernel, model_family, theta_bounds).
    """

    param: str
    values: tuple
    target: str = "payoff"

    def __post_init__(self):
        v = np.asarray(self.values, float)
        if v.ndim != 1 or v.size == 0:
            raise ValueError("shock values must be a nonempty list")
        dv = np.diff(v)
        if v.size > 1 and not (np.all(dv > 0) or np.all(dv < 0)):
            raise ValueError("shock values must be strictly monotone")
        if self.target not in SHOCK_TARGETS:
            raise ValueError(f"target must be one of {SHOCK_TARGETS}")
        object.__setattr__(self, "values", tuple(float(x) for x in v))


@dataclass
class SweepRecord:
    value: float
    status: str
    equilibria: list = field(default_factory=list)
    smdp: Smdp | None = None

    @property
    def theta_least(self) -> float:
        return self.equilibria[0].theta_star if self.equilibria else math.nan

    @property
    def theta_greatest(self) -> float:
        return self.equilibria[-1].theta_star if self.equilibria else math.nan

    @property
    def state_mean(self) -> float:
        if not self.equilibria:
            return math.nan
        ms = self.equilibria[-1].m_star.state_marginal
        return float(ms @ self.smdp.mdp.states.coords[:, 0])


@dataclass(frozen=True)
class PairVerdict:
    """Order verdicts between consecutive sweep values (previous, current).

    Directions read ``"up"`` (current dominates), ``"down"`` (previous
    dominates), ``"equal"`` (both) or ``"none"``.
    """

    theta: str
    fosd: str
    icx: str
    shock: str
    approximate: bool
    strong_set_order: bool | None = None


def _direction(up: bool, down: bool) -> str:
    if up and down:
        return "equal"
    return "up" if up else ("down" if down else "none")


def _ordered(a: float, b: float) -> bool:
    return b >= a - THETA_TOL


@dataclass
class SweepResult:
    shock: ShockSpec
    records: list
    pairs: list

    @property
    def violations(self) -> list:
        """Pairs whose theta and state-marginal directions disagree with
        the shock class (positive: up, negative: down)."""
        bad = []
        for i, p in enumerate(self.pairs):
            want = {"positive": "up", "negative": "down"}.get(p.shock)
            if want is None:
                continue
            for name, got in (("theta", p.theta), ("fosd", p.fosd)):
                if got not in (want, "equal"):
                    bad.append((i + 1, name, got, p.shock))
        return bad

    def rows(self):
        for i, r in enumerate(self.records):
            p = self.pairs[i - 1] if i > 0 else None
            yield (
                r.value,
                r.theta_least,
                r.theta_greatest,
                r.state_mean,
                p.fosd if p else "",
                p.icx if p else "",
                p.shock if p else "",
                r.status,
            )

    def to_csv(self, target=None) -> str | None:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(SWEEP_COLUMNS)
        for row in self.rows():
            w.writerow([repr(x) if isinstance(x, float) else x for x in row])
        text = buf.getvalue()
        if target is None:
            return text
        with open(target, "w", newline="") as fh:
            fh.write(text)
        return None


def _solve_point(builder, value, opts):
    try:
        smdp = builder(value)
    except Exception as exc:  # per-value failure is recorded, not raised
        return SweepRecord(value, f"build-error: {exc}")
    try:
        eqs = solve_berk_nash(smdp, opts)
    except NoEquilibriumError as exc:
        return SweepRecord(value, f"no-equilibrium: {exc}", smdp=smdp)
    except Exception as exc:
        return SweepRecord(value, f"error: {exc}", smdp=smdp)
    return SweepRecord(value, "ok", eqs, smdp)


def sweep(
    builder: Callable[[float], Smdp],
    shock: ShockSpec,
    opts: SolverOptions | None = None,
    jobs: int = 1,
    classify: bool = True,
    probe_stride: int = 1,
) -> SweepResult:
    """Solve at every shock value and compare consecutive values.

    Parameters
    ----------
    builder : callable
        Maps a primitive value to an :class:`Smdp`. Must be picklable when
        ``jobs > 1``.
    jobs : int
        Worker processes; results are aggregated in value order.
    classify : bool
        Run :func:`verify_positive_shock` on each consecutive pair.
    """
    opts = opts or SolverOptions()
    values = sorted(shock.values)
    if jobs > 1:
        with ProcessPoolExecutor(max_workers=min(jobs, os.cpu_count() or 1)) as ex:
            records = list(ex.map(_solve_point, [builder] * len(values), values, [opts] * len(values)))
    else:
        records = [_solve_point(builder, v, opts) for v in values]
    pairs = []
    for prev, cur in zip(records, records[1:]):
        pairs.append(_compare(prev, cur, shock, opts, classify, probe_stride))
    return SweepResult(shock, records, pairs)


def _compare(prev: SweepRecord, cur: SweepRecord, shock, opts, classify, stride) -> PairVerdict:
    sso = None
    if shock.target == "theta_bounds" and prev.smdp is not None and cur.smdp is not None:
        sso = check_strong_set_order(prev.smdp.theta_grid.points, cur.smdp.theta_grid.points)
    shock_class = "unknown"
    if classify and prev.smdp is not None and cur.smdp is not None:
        try:
            shock_class = verify_positive_shock(prev.smdp, cur.smdp, opts=opts, stride=stride)
        except ValueError:
            shock_class = "unknown"
    if not (prev.equilibria and cur.equilibria):
        return PairVerdict("none", "none", "none", shock_class, False, sso)
    t_up = _ordered(prev.theta_least, cur.theta_least) and _ordered(prev.theta_greatest, cur.theta_greatest)
    t_dn = _ordered(cur.theta_least, prev.theta_least) and _ordered(cur.theta_greatest, prev.theta_greatest)
    coords = cur.smdp.mdp.states.coords
    f_up = f_dn = i_up = i_dn = True
    approx = False
    for k in (0, -1):
        p, q = prev.equilibria[k].m_star.state_marginal, cur.equilibria[k].m_star.state_marginal
        for fun, name in ((check_fosd_marginal, "f"), (check_icx_marginal, "i")):
            a, b = fun(p, q, coords), fun(q, p, coords)
            approx = approx or a.approximate
            if name == "f":
                f_up, f_dn = f_up and a.holds, f_dn and b.holds
            else:
                i_up, i_dn = i_up and a.holds, i_dn and b.holds
    return PairVerdict(
        _direction(t_up, t_dn), _direction(f_up, f_dn), _direction(i_up, i_dn), shock_class, approx, sso
    )
