import json
import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from berknash.mdp_core import Grid, Kernel, Mdp, Policy
from berknash.welfare import (
    bretagnolle_huber,
    correct_policy,
    objective_welfare,
    policy_gap,
    theorem5_bound,
    welfare_report,
)
from instances import random_smooth_instance

nonneg = st.floats(0.0, 10.0)


class TestObjectiveWelfare:
    def test_unit_payoff(self, rng):
        k = Kernel.normalized(rng.random((4, 3, 4)))
        w = objective_welfare(k, np.ones((4, 3)), 0.9, Policy(np.full((4, 3), 1 / 3)))
        np.testing.assert_allclose(w, 10.0, atol=1e-12)

    def test_zero_discount(self, rng):
        k = Kernel.normalized(rng.random((3, 2, 3)))
        u = rng.normal(size=(3, 2))
        pol = Policy.from_actions([0, 1, 1], 2)
        np.testing.assert_allclose(objective_welfare(k, u, 0.0, pol), u[[0, 1, 2], [0, 1, 1]], atol=1e-15)

    def test_two_state_closed_form(self):
        # absorbing state 1 pays 1, state 0 pays 0 and moves with prob 1/2
        k = Kernel(np.array([[[0.5, 0.5]], [[0.0, 1.0]]]))
        w = objective_welfare(k, np.array([[0.0], [1.0]]), 0.5, Policy(np.ones((2, 1))))
        # W1 = 2, W0 = 0.5 (0.5 W0 + 0.5 W1) -> W0 = 2/3
        np.testing.assert_allclose(w, [2 / 3, 2.0], atol=1e-14)

    def test_effort_correct_beats_equilibrium(self, effort, effort_eq):
        rep = welfare_report(effort, effort_eq)
        assert all(c >= m - 1e-9 for c, m in zip(rep.w_correct, rep.w_misspec))
        # always-H earns 1 - c forever, so the optimum is at least 5.5
        always_h = objective_welfare(effort.mdp.kernel, effort.mdp.payoff, 0.9, Policy.from_actions([1, 1], 2))
        np.testing.assert_allclose(always_h, 5.5, atol=1e-12)
        assert min(rep.w_correct) >= 5.5


class TestBretagnolleHuber:
    @pytest.mark.parametrize(
        "kl,want", [(0.0, 0.0), (math.log(2), 1.4142135623730951), (math.inf, 2.0)]
    )
    def test_values(self, kl, want):
        assert bretagnolle_huber(kl) == pytest.approx(want, abs=1e-15)

    def test_negative(self):
        with pytest.raises(ValueError):
            bretagnolle_huber(-1e-3)

    @given(st.floats(0.0, 50.0), st.floats(0.0, 50.0))
    def test_monotone_and_bounded(self, a, b):
        lo, hi = sorted((a, b))
        assert bretagnolle_huber(lo) <= bretagnolle_huber(hi) <= 2.0


class TestBound:
    def test_worked_example(self):
        # m0 = 1, m1 = 2, gamma = 0.1, k = 0.5, beta = 0.9; e = 1 - exp(-0.5)
        assert theorem5_bound(1, 2, 0.1, 0.5, 0.9, "statement") == pytest.approx(9.082448125172599, rel=1e-14)
        assert theorem5_bound(1, 2, 0.1, 0.5, 0.9, "proof") == pytest.approx(13.290884210419781, rel=1e-14)
        assert theorem5_bound(1, 2, 0.1, 0.5, 0.9) == theorem5_bound(1, 2, 0.1, 0.5, 0.9, "proof")

    def test_zero_inputs(self):
        assert theorem5_bound(3.0, 2.0, 0.0, 0.0, 0.9) == 0.0

    def test_infinite_kl(self):
        assert theorem5_bound(1, 0, 0, math.inf, 0.5) == pytest.approx(2.0)

    @pytest.mark.parametrize(
        "args", [(-1, 0, 0, 0, 0.5), (1, 0, 0, 0, 1.0), (1, 0, -0.1, 0, 0.5)]
    )
    def test_rejects(self, args):
        with pytest.raises(ValueError):
            theorem5_bound(*args)

    def test_unknown_form(self):
        with pytest.raises(ValueError):
            theorem5_bound(1, 1, 1, 1, 0.5, "loose")

    @given(nonneg, nonneg, nonneg, nonneg, st.floats(0.0, 0.99), st.floats(0.0, 1.0))
    def test_monotone_in_inputs(self, m0, m1, gamma, k, beta, bump):
        base = theorem5_bound(m0, m1, gamma, k, beta)
        for i in range(4):
            args = [m0, m1, gamma, k]
            args[i] += bump
            assert theorem5_bound(*args, beta) >= base - 1e-12 * max(1.0, base)
        assert theorem5_bound(m0, m1, gamma, k, min(beta + bump * 0.009, 0.999)) >= base - 1e-12 * max(1.0, base)


class TestPolicyGap:
    def test_pure(self):
        a = [0.0, 0.5, 2.0]
        assert policy_gap(a, Policy.from_actions([0, 1], 3), Policy.from_actions([2, 1], 3)) == 2.0

    def test_mixed_earth_mover(self):
        # half the mass moves by 1
        assert policy_gap([0.0, 1.0], Policy([[1.0, 0.0]]), Policy([[0.5, 0.5]])) == 0.5

    def test_single_action(self):
        assert policy_gap([3.0], Policy([[1.0]]), Policy([[1.0]])) == 0.0


class TestReport:
    @pytest.mark.parametrize("seed", range(30))
    def test_random_smooth_instances(self, seed):
        mdp, pol = random_smooth_instance(seed)
        rep = welfare_report(mdp, pol)
        assert rep.smooth_applicable
        assert rep.gap_supnorm <= rep.bound + 1e-9
        assert rep.bound_satisfied
        assert min(c - m for c, m in zip(rep.w_correct, rep.w_misspec)) >= -1e-9
        assert rep.k_star_recurrent <= rep.k_star

    def test_same_policy_gives_zero(self, rng):
        mdp, _ = random_smooth_instance(3)
        pol = correct_policy(mdp)
        rep = welfare_report(mdp, pol, correct=pol)
        assert rep.gamma == 0.0 and rep.k_star == 0.0
        assert rep.gap_supnorm == 0.0 and rep.bound == 0.0 and rep.bound_satisfied

    def test_binary_actions_flagged(self, effort, effort_eq):
        rep = welfare_report(effort, effort_eq)
        assert not rep.smooth_applicable
        assert rep.bound_satisfied

    def test_json(self, effort, effort_eq):
        d = json.loads(welfare_report(effort, effort_eq).to_json())
        assert {"w_correct", "w_misspec", "gap_supnorm", "bound", "m0", "m1", "gamma", "k_star"} <= set(d)

    def test_correct_policy_is_optimal(self):
        k = Kernel(np.array([[[1.0, 0.0], [0.0, 1.0]], [[1.0, 0.0], [0.0, 1.0]]]))
        mdp = Mdp(Grid([0, 1]), Grid([0, 1]), k, np.array([[0.0, -0.1], [0.0, 1.0]]), 0.9)
        # pay 0.1 once to reach the state paying 1 forever
        np.testing.assert_array_equal(correct_policy(mdp).action_indices, [1, 1])
