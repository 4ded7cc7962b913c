import json

import numpy as np
import pytest

from fisherlc.bpsop import (budget_slack_report, existence_test_homogeneous, fixed_point, pareto_certificate,
                            solve_bpsop)
from fisherlc.iop import solve_iop
from fisherlc.market import (COBB_DOUGLAS, Agent, ConstraintSet, Market, MarketError, UtilitySpec, load_scenario,
                             random_market)


def decoupled():
    agents = (Agent(1.0, UtilitySpec.linear([1, 0]), ConstraintSet.empty(2)),
              Agent(1.0, UtilitySpec.linear([0, 1]), ConstraintSet.empty(2)))
    return Market(agents, [1.0, 1.0])


def nonhomogeneous(seed=0):
    return random_market(seed, 10, 20, [list(range(10)), list(range(10, 20))], 0.5)


class TestSolve:
    def test_single_agent_single_good(self):
        mk = Market((Agent(2.0, UtilitySpec.linear([1.0]), ConstraintSet.empty(1)),), [1.0])
        sol = solve_bpsop(mk)
        assert sol.x[0, 0] == pytest.approx(1.0, abs=1e-9)
        assert sol.p[0] == pytest.approx(2.0, abs=1e-7)

    def test_decoupled_agents(self):
        sol = solve_bpsop(decoupled())
        np.testing.assert_allclose(sol.p, [1, 1], atol=1e-7)
        np.testing.assert_allclose(sol.x, np.eye(2), atol=1e-7)

    def test_negative_price_at_known_lambda(self):
        mk, exp = load_scenario("negative-price")
        sol = solve_bpsop(mk, exp.notes["fixed_point_lambda"])
        np.testing.assert_allclose(sol.p, exp.equilibria[0], atol=1e-4)
        np.testing.assert_allclose(sol.x, exp.allocations[0], atol=1e-4)

    def test_invariants(self):
        mk, _ = load_scenario("nonconvex")
        sol = solve_bpsop(mk, np.ones(mk.n))
        np.testing.assert_allclose(sol.x.sum(axis=0), mk.capacities, atol=1e-8)
        assert np.all(sol.x >= 0)
        assert all(np.all(r >= 0) for r in sol.r)
        for i, a in enumerate(mk.agents):
            assert np.all(a.constraints.A @ sol.x[i] <= a.constraints.b + 1e-8)

    def test_cobb_douglas_market(self):
        mk = random_market(1, 3, 4, utility=COBB_DOUGLAS)
        sol = solve_bpsop(mk)
        # homogeneous market: prices exhaust budgets and clear
        np.testing.assert_allclose(sol.x @ sol.p, mk.budgets, atol=1e-6)
        assert sol.p @ mk.capacities == pytest.approx(mk.budgets.sum(), rel=1e-6)

    def test_negative_lambda_rejected(self):
        with pytest.raises(ValueError):
            solve_bpsop(decoupled(), [-1.0, 0.0])


class TestFixedPoint:
    def test_homogeneous_market_stops_at_once(self):
        res = fixed_point(random_market(4, 5, 3))
        assert res.converged
        assert res.iterations == 1
        np.testing.assert_array_equal(res.lam, np.zeros(5))

    def test_homogeneous_rows_stop_at_once(self):
        a = Agent(1.0, UtilitySpec.linear([1, 1]), ConstraintSet.from_rows([([1, -1], 0)], 2))
        res = fixed_point(Market((a,), [1.0, 1.0]))
        assert res.iterations == 1

    @pytest.mark.parametrize("name", ["negative-price", "nonconvex"])
    def test_scenario_fixed_points_are_equilibria(self, name):
        from fisherlc.verify import check_equilibrium
        mk, _ = load_scenario(name)
        res = fixed_point(mk, tol=1e-7)
        assert res.converged
        sol = res.solution
        np.testing.assert_allclose(sol.x.sum(axis=0), mk.capacities, rtol=1e-6)
        np.testing.assert_allclose(sol.x @ sol.p, mk.budgets, rtol=1e-6)
        for i, a in enumerate(mk.agents):
            best = solve_iop(a, sol.p).objective
            assert a.utility.coeffs @ sol.x[i] == pytest.approx(best, rel=1e-6)
        assert check_equilibrium(mk, sol.p, tol=1e-5).is_equilibrium

    def test_negative_price_lambda_is_fixed(self):
        mk, exp = load_scenario("negative-price")
        res = fixed_point(mk, lam0=exp.notes["fixed_point_lambda"], tol=1e-8)
        assert res.iterations == 1
        np.testing.assert_allclose(res.solution.p, exp.equilibria[0], atol=1e-4)

    def test_negative_price_market_from_zero(self):
        # from lam = 0 the iteration lands on a second equilibrium with positive prices
        mk, _ = load_scenario("negative-price")
        res = fixed_point(mk, tol=1e-8)
        np.testing.assert_allclose(res.lam, [42 / 55, 0], atol=1e-6)
        np.testing.assert_allclose(res.solution.p, [21 / 220, 21 / 22, 189 / 20], atol=1e-6)

    def test_lambda_stays_nonnegative(self):
        mk, _ = load_scenario("nonconvex")
        res = fixed_point(mk, tol=1e-7)
        assert all(np.all(l >= 0) for l in res.lambdas)
        assert all(r >= 0 for r in res.residuals)

    def test_budget_identity_at_solutions(self):
        mk, _ = load_scenario("negative-price")
        res = fixed_point(mk, tol=1e-7)
        sol = res.solution
        ident = mk.budgets + res.lam - sol.x @ sol.p - sol.weighted_r
        assert np.max(np.abs(ident)) <= 1e-5

    def test_non_convergence_is_reported(self):
        mk, _ = load_scenario("nonconvex")
        res = fixed_point(mk, tol=1e-14, max_iter=2)
        assert not res.converged
        assert res.iterations == 2

    def test_serialization(self):
        res = fixed_point(load_scenario("negative-price")[0], tol=1e-7)
        assert json.loads(res.to_json())["converged"]
        lines = res.residual_csv().splitlines()
        assert lines[0] == "iter,residual"
        assert len(lines) == res.iterations + 1

    def test_bad_arguments(self):
        with pytest.raises(ValueError):
            fixed_point(decoupled(), lam0=[-1, 0])
        with pytest.raises(ValueError):
            fixed_point(decoupled(), damping=1.0)

    def test_zero_budget_rejected_upstream(self):
        mk = Market((Agent(0.0, UtilitySpec.linear([1.0]), ConstraintSet.empty(1)),), [1.0])
        with pytest.raises(MarketError):
            fixed_point(mk)


class TestExistence:
    def test_decoupled(self):
        res = existence_test_homogeneous(decoupled())
        assert res.exists
        assert np.max(np.abs(res.slack)) <= 1e-6

    def test_nonexistence_scenario(self):
        res = existence_test_homogeneous(load_scenario("nonexist-homog")[0])
        assert not res.exists
        assert res.slack[0] > 1e-6

    def test_single_agent_proportional_row(self):
        a = Agent(1.0, UtilitySpec.linear([1, 1]), ConstraintSet.from_rows([([1, -1], 0)], 2))
        assert existence_test_homogeneous(Market((a,), [1.0, 1.0])).exists

    def test_rejects_nonhomogeneous(self):
        with pytest.raises(MarketError):
            existence_test_homogeneous(load_scenario("negative-price")[0])


class TestPareto:
    @pytest.mark.parametrize("name", ["negative-price", "nonconvex"])
    def test_fixed_point_allocations(self, name):
        mk, _ = load_scenario(name)
        res = fixed_point(mk, tol=1e-7)
        cert = pareto_certificate(mk, res.solution.x)
        assert cert.is_pareto
        assert cert.gain <= 1e-7

    def test_empty_allocation_is_dominated(self):
        cert = pareto_certificate(decoupled(), np.zeros((2, 2)))
        assert not cert.is_pareto
        np.testing.assert_allclose(cert.dominating, np.eye(2), atol=1e-9)

    def test_single_agent_takes_everything(self):
        mk = Market((Agent(1.0, UtilitySpec.linear([1, 2]), ConstraintSet.empty(2)),), [1.0, 1.0])
        assert pareto_certificate(mk, np.ones((1, 2))).is_pareto

    def test_wasteful_allocation(self):
        mk, _ = load_scenario("negative-price")
        cert = pareto_certificate(mk, np.array([[0.5, 0, 0.5], [0, 0.5, 0]]))
        assert not cert.is_pareto
        assert cert.dominating is not None

    def test_infeasible_allocation_rejected(self):
        with pytest.raises(MarketError):
            pareto_certificate(decoupled(), np.full((2, 2), 1.0))

    def test_smooth_utilities_flagged_local(self):
        mk = random_market(2, 3, 3, utility=COBB_DOUGLAS)
        cert = pareto_certificate(mk, solve_bpsop(mk).x)
        assert cert.local
        assert cert.is_pareto


class TestBudgetSlack:
    def test_homogeneous(self):
        rep = budget_slack_report(random_market(5, 4, 3))
        assert np.max(np.abs(rep.slack)) <= 1e-7

    def test_binding_knapsacks_leave_budget(self):
        rep = budget_slack_report(nonhomogeneous(0))
        assert np.max(rep.slack) > 1e-3
        assert rep.discrepancy <= 1e-5

    def test_nonbinding_rows(self):
        rows = [([1, 1, 0], 1e6)]
        agents = tuple(Agent(w, UtilitySpec.linear(u), ConstraintSet.from_rows(rows, 3))
                       for w, u in [(1.0, [1, 2, 3]), (2.0, [3, 1, 1])])
        rep = budget_slack_report(Market(agents, [1, 1, 1]))
        assert np.max(np.abs(rep.slack)) <= 1e-7
