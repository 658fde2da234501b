import csv
import io

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from berknash.comparative_statics import (
    SWEEP_COLUMNS,
    ShockSpec,
    check_fosd,
    check_fosd_marginal,
    check_icx,
    check_icx_marginal,
    check_strong_set_order,
    joint_coords,
    sweep,
    verify_positive_shock,
)
from berknash.examples_registry import EffortTaskSpec, build_effort_task
from berknash.mdp_core import Grid, JointDistribution

seeds = st.integers(0, 2**32 - 1)


def push_up(rng, p, coords):
    """Move a random share of each point's mass to a random point above it."""
    q = np.zeros_like(p)
    for i, w in enumerate(p):
        above = np.flatnonzero(np.all(coords >= coords[i], axis=1))
        j = rng.choice(above)
        share = rng.uniform()
        q[i] += w * (1 - share)
        q[j] += w * share
    return q


def lattice(S, X):
    return np.stack(np.meshgrid(np.arange(S), np.arange(X), indexing="ij"), -1).reshape(-1, 2).astype(float)


def random_lattice_dist(rng, S=4, X=4):
    return rng.dirichlet(np.ones(S * X)), lattice(S, X)


class TestFosd:
    def test_chain_tails(self):
        pts = [0.0, 1.0, 2.0]
        assert check_fosd_marginal([0.5, 0.5, 0.0], [0.2, 0.5, 0.3], pts)
        assert not check_fosd_marginal([0.2, 0.5, 0.3], [0.5, 0.5, 0.0], pts)

    def test_incomparable_pair_on_lattice(self):
        # mass at (1, 0) versus (0, 1): neither dominates
        a = JointDistribution(np.array([[0.0, 0.0], [1.0, 0.0]]))
        b = JointDistribution(np.array([[0.0, 1.0], [0.0, 0.0]]))
        assert not check_fosd(a, b) and not check_fosd(b, a)

    def test_upper_sets_beat_quadrants(self):
        # a quadrant-only test misses the L-shaped upper set {(0,1), (1,0), (1,1)}
        a = JointDistribution(np.array([[0.0, 0.5], [0.5, 0.0]]))
        b = JointDistribution(np.array([[0.5, 0.0], [0.0, 0.5]]))
        v = check_fosd(a, b)
        assert not v and not v.approximate and v.method == "upper-sets"
        assert v.worst == pytest.approx(-0.5)

    def test_large_support_is_flagged(self):
        rng = np.random.default_rng(0)
        p, c = random_lattice_dist(rng, 5, 5)
        v = check_fosd_marginal(p, p, c)
        assert v.holds and v.approximate

    def test_coordinate_mismatch(self):
        with pytest.raises(ValueError):
            check_fosd_marginal([0.5, 0.5], [0.5, 0.5], [[0.0], [1.0], [2.0]])

    @given(seeds)
    def test_reflexive(self, seed):
        p, c = random_lattice_dist(np.random.default_rng(seed))
        assert check_fosd_marginal(p, p, c)

    @given(seeds)
    def test_upward_transport_dominates(self, seed):
        rng = np.random.default_rng(seed)
        p, c = random_lattice_dist(rng)
        q = push_up(rng, p, c)
        assert check_fosd_marginal(p, q, c, tol=1e-12)

    @given(seeds)
    def test_transitive(self, seed):
        rng = np.random.default_rng(seed)
        p, c = random_lattice_dist(rng)
        q = push_up(rng, p, c)
        r = push_up(rng, q, c)
        assert check_fosd_marginal(p, r, c, tol=1e-12)

    @given(seeds)
    def test_antisymmetric(self, seed):
        rng = np.random.default_rng(seed)
        p, c = random_lattice_dist(rng)
        q = push_up(rng, p, c)
        if check_fosd_marginal(q, p, c, tol=1e-12):
            np.testing.assert_allclose(p, q, atol=1e-9)

    @given(seeds)
    def test_fosd_implies_icx(self, seed):
        rng = np.random.default_rng(seed)
        p, c = random_lattice_dist(rng)
        q = push_up(rng, p, c)
        assert check_icx_marginal(p, q, c, tol=1e-12)


class TestIcx:
    def test_mean_preserving_spread(self):
        pts = [0.0, 1.0, 2.0]
        p, q = [0.0, 1.0, 0.0], [0.5, 0.0, 0.5]
        assert check_icx_marginal(p, q, pts)
        assert not check_icx_marginal(q, p, pts)
        assert not check_fosd_marginal(p, q, pts)

    def test_exact_in_one_dimension(self):
        v = check_icx_marginal([1.0, 0.0], [0.0, 1.0], [0.0, 1.0])
        assert v.holds and not v.approximate and v.method == "stop-loss"

    def test_joint_default_coords(self):
        a = JointDistribution(np.array([[0.5, 0.0], [0.0, 0.5]]))
        b = JointDistribution(np.array([[0.0, 0.0], [0.0, 1.0]]))
        v = check_icx(a, b)
        assert v.holds and v.approximate
        assert not check_icx(b, a)

    @given(seeds)
    def test_spreads_on_a_chain(self, seed):
        rng = np.random.default_rng(seed)
        pts = np.arange(9, dtype=float)
        p = rng.dirichlet(np.ones(9))
        # split interior mass symmetrically one step outwards
        q = p.copy()
        i = int(rng.integers(1, 8))
        w = q[i] * rng.uniform()
        q[i] -= w
        q[i - 1] += w / 2
        q[i + 1] += w / 2
        assert check_icx_marginal(p, q, pts, tol=1e-12)


class TestJointCoords:
    def test_layout(self):
        c = joint_coords(Grid([0.0, 1.0]), Grid([5.0, 6.0, 7.0]))
        assert c.shape == (6, 2)
        np.testing.assert_array_equal(c[4], [1.0, 6.0])


class TestStrongSetOrder:
    @pytest.mark.parametrize(
        "a,b,want",
        [
            ([0.0, 1.0], [0.0, 1.0], True),
            ([0.0], [1.0], True),
            ([1.0], [0.0], False),
            ([0.0, 1.0], [1.0, 2.0], True),
            ([0.0, 1.0], [0.5], False),
            ([0.5], [0.0, 1.0], False),
            ([0.0, 2.0], [1.0, 2.0], False),
        ],
    )
    def test_examples(self, a, b, want):
        assert check_strong_set_order(a, b) is want

    @given(st.lists(st.integers(0, 6), min_size=1, max_size=5))
    def test_reflexive_on_intervals(self, xs):
        s = list(range(min(xs), max(xs) + 1))
        assert check_strong_set_order(s, s)


def effort_builder(c):
    return build_effort_task(EffortTaskSpec(c, 0.3, 0.65, theta_points=101))


@pytest.fixture(scope="module")
def cost_sweep():
    return sweep(effort_builder, ShockSpec("c", (0.40, 0.45, 0.50), "payoff"))


class TestSweep:
    def test_theta_tracks_indifference(self, cost_sweep):
        got = [r.theta_greatest for r in cost_sweep.records]
        np.testing.assert_allclose(got, [0.6, 0.55, 0.5], atol=1e-6)

    def test_cost_is_negative_shock(self, cost_sweep):
        assert [p.shock for p in cost_sweep.pairs] == ["negative", "negative"]
        assert [p.theta for p in cost_sweep.pairs] == ["down", "down"]
        assert [p.fosd for p in cost_sweep.pairs] == ["down", "down"]
        assert cost_sweep.violations == []

    def test_csv(self, cost_sweep):
        rows = list(csv.reader(io.StringIO(cost_sweep.to_csv())))
        assert tuple(rows[0]) == SWEEP_COLUMNS
        assert len(rows) == 4
        assert rows[1][4:7] == ["", "", ""]
        assert rows[2][6] == "negative"

    def test_csv_file(self, cost_sweep, tmp_path):
        out = tmp_path / "sweep.csv"
        assert cost_sweep.to_csv(out) is None
        assert out.read_text() == cost_sweep.to_csv()

    def test_single_value(self):
        res = sweep(effort_builder, ShockSpec("c", (0.45,)))
        assert res.pairs == [] and res.records[0].status == "ok"

    def test_build_error_recorded(self):
        # c = 0.3 puts 1 - c above q1
        res = sweep(effort_builder, ShockSpec("c", (0.3, 0.45)), classify=False)
        assert res.records[0].status.startswith("build-error")
        assert res.records[1].status == "ok"
        assert res.pairs[0].theta == "none"

    def test_values_sorted(self):
        res = sweep(effort_builder, ShockSpec("c", (0.5, 0.45)), classify=False)
        assert [r.value for r in res.records] == [0.45, 0.5]

    @pytest.mark.parametrize("values", [(), (0.4, 0.4), (0.4, 0.5, 0.45)])
    def test_values_monotone(self, values):
        with pytest.raises(ValueError):
            ShockSpec("c", values)

    def test_target_checked(self):
        with pytest.raises(ValueError):
            ShockSpec("c", (0.4,), "weather")

    def test_identical_problems_are_positive(self, effort):
        assert verify_positive_shock(effort, effort, stride=10) == "positive"

    def test_theta_bounds_records_sso(self):
        def build(v):
            return build_effort_task(EffortTaskSpec(0.45, 0.3, 0.65, theta_upper=v, theta_points=round(v / 0.01) + 1))

        res = sweep(build, ShockSpec("theta_upper", (0.7, 1.0), "theta_bounds"), classify=False)
        assert res.pairs[0].strong_set_order is True
        assert res.pairs[0].theta == "equal"
