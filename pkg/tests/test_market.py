import numpy as np
import pytest

from fisherlc.kernels import finite_difference_check
from fisherlc.market import (CES, COBB_DOUGLAS, LINEAR, SCENARIOS, Agent, ConstraintSet, Market, MarketError,
                             UtilitySpec, check_existence_conditions, evaluate_utility, load_scenario,
                             log_utility_derivs, random_market, validate_market)


def tiny_market(cap=1.0, rows=()):
    agent = Agent(1.0, UtilitySpec.linear([1.0]), ConstraintSet.from_rows(list(rows), 1))
    return Market((agent,), [cap])


def random_spec(rng, kind, m):
    w = rng.uniform(0.1, 1.0, m)
    if kind == LINEAR:
        return UtilitySpec.linear(w)
    if kind == COBB_DOUGLAS:
        return UtilitySpec.cobb_douglas(w / w.sum())
    return UtilitySpec.ces(w, rng.uniform(0.2, 0.9))


class TestValidation:
    def test_minimal_market_is_valid(self):
        assert validate_market(tiny_market()) == []

    def test_zero_capacity_reported(self):
        problems = validate_market(tiny_market(cap=0.0))
        assert len(problems) == 1
        assert "capacity must be > 0" in problems[0]

    def test_negative_rhs_reported(self):
        problems = validate_market(tiny_market(rows=[([1.0], -1.0)]))
        assert len(problems) == 1
        assert "nonnegative" in problems[0]

    def test_unnormalized_cobb_douglas_rejected(self):
        spec = UtilitySpec.cobb_douglas([0.5, 0.6])
        assert spec.problems()

    def test_zero_budget_rejected(self):
        agent = Agent(0.0, UtilitySpec.linear([1.0]), ConstraintSet.empty(1))
        assert any("budget" in p for p in validate_market(Market((agent,), [1.0])))


class TestUtilities:
    def test_linear_value_and_gradient(self):
        val, grad = evaluate_utility(UtilitySpec.linear([1, 2]), [1, 1])
        assert val == 3.0
        np.testing.assert_array_equal(grad, [1, 2])

    def test_cobb_douglas_value_and_gradient(self):
        val, grad = evaluate_utility(UtilitySpec.cobb_douglas([0.5, 0.5]), [4, 1])
        assert val == pytest.approx(2.0, abs=1e-14)
        np.testing.assert_allclose(grad, [0.25, 1.0], atol=1e-14)

    def test_zero_coordinate_gives_infinite_gradient(self):
        val, grad = evaluate_utility(UtilitySpec.cobb_douglas([0.5, 0.5]), [0, 1])
        assert val == 0.0
        assert np.isinf(grad[0])

    def test_dimension_mismatch(self):
        with pytest.raises(MarketError):
            evaluate_utility(UtilitySpec.linear([1, 2]), [1, 2, 3])

    @pytest.mark.parametrize("kind", [LINEAR, COBB_DOUGLAS, CES])
    @pytest.mark.parametrize("seed", range(10))
    def test_degree_one_homogeneity(self, kind, seed):
        rng = np.random.default_rng(seed)
        spec = random_spec(rng, kind, 5)
        x = rng.uniform(0.05, 2.0, 5)
        u, _ = evaluate_utility(spec, x)
        for t in (0.5, 2.0):
            ut, _ = evaluate_utility(spec, t * x)
            assert abs(ut - t * u) <= 1e-10 * max(1.0, abs(u))

    @pytest.mark.parametrize("kind", [LINEAR, COBB_DOUGLAS, CES])
    @pytest.mark.parametrize("seed", range(10))
    def test_euler_identity(self, kind, seed):
        rng = np.random.default_rng(100 + seed)
        spec = random_spec(rng, kind, 6)
        x = rng.uniform(0.05, 2.0, 6)
        u, g = evaluate_utility(spec, x)
        assert abs(g @ x - u) <= 1e-10 * max(1.0, abs(u))

    @pytest.mark.parametrize("kind", [LINEAR, COBB_DOUGLAS, CES])
    @pytest.mark.parametrize("seed", range(10))
    def test_gradient_matches_central_differences(self, kind, seed):
        rng = np.random.default_rng(200 + seed)
        spec = random_spec(rng, kind, 4)
        x = rng.uniform(0.2, 2.0, 4)

        def oracle(v):
            val, grad = evaluate_utility(spec, v)
            return val, grad, None

        assert finite_difference_check(oracle, x).gradient_error <= 1e-6

    @pytest.mark.parametrize("kind", [LINEAR, COBB_DOUGLAS, CES])
    def test_log_derivatives_match_central_differences(self, kind):
        rng = np.random.default_rng(7)
        spec = random_spec(rng, kind, 4)
        x = rng.uniform(0.2, 2.0, 4)
        check = finite_difference_check(lambda v: log_utility_derivs(spec, v), x)
        assert check.worst <= 1e-6


class TestRandomMarket:
    def test_deterministic(self):
        assert random_market(7, 2, 2) == random_market(7, 2, 2)

    def test_fixed_point_experiment_shape(self):
        mk = random_market(7, 200, 6, [[0, 1], [2, 3], [4, 5]], 100.0)
        assert (mk.n, mk.m) == (200, 6)
        assert all(a.constraints.count == 3 for a in mk.agents)
        np.testing.assert_array_equal(mk.capacities, np.full(6, 100.0))
        assert np.all((mk.budgets >= 0) & (mk.budgets <= 1))

    def test_nonhomogeneous_experiment_shape(self):
        mk = random_market(3, 10, 20, [list(range(10)), list(range(10, 20))], 0.5)
        assert (mk.n, mk.m) == (10, 20)
        assert all(a.constraints.count == 2 for a in mk.agents)
        assert not mk.homogeneous

    def test_overlapping_blocks_rejected(self):
        with pytest.raises(MarketError):
            random_market(0, 2, 3, [[0, 1], [1, 2]])

    def test_cobb_douglas_exponents_normalized(self):
        mk = random_market(1, 3, 4, utility=COBB_DOUGLAS)
        for a in mk.agents:
            assert a.utility.coeffs.sum() == pytest.approx(1.0, abs=1e-12)


class TestScenarios:
    @pytest.mark.parametrize("name", sorted(SCENARIOS))
    def test_json_round_trip(self, name):
        mk, _ = load_scenario(name)
        again = Market.from_json(mk.to_json())
        assert again == mk
        assert again.digest() == mk.digest()

    def test_unknown_name(self):
        with pytest.raises(MarketError):
            load_scenario("no-such-market")

    def test_nonexist_knapsack_table(self):
        mk, exp = load_scenario("nonexist-knapsack")
        np.testing.assert_array_equal(mk.capacities, [1.5, 0.5])
        np.testing.assert_array_equal(mk.budgets, [15, 5])
        np.testing.assert_array_equal(mk.agents[0].utility.coeffs, [200, 0.1])
        np.testing.assert_array_equal(mk.agents[1].utility.coeffs, [100, 1.1])
        assert exp.equilibrium_exists is False

    def test_negative_price_expectations(self):
        _, exp = load_scenario("negative-price")
        np.testing.assert_array_equal(exp.equilibria[0], [-1, 0.5, 11])
        np.testing.assert_array_equal(exp.allocations[0], [[1, 0, 1], [0, 1, 0]])

    def test_nonconvex_expectations(self):
        _, exp = load_scenario("nonconvex")
        np.testing.assert_allclose(exp.equilibria[0], [1, 2, 3, 1], atol=1e-15)
        np.testing.assert_allclose(exp.equilibria[1], [46 / 49, 106 / 49, 142 / 49, 1], atol=1e-15)
        np.testing.assert_allclose(exp.non_equilibria[0], [95 / 98, 204 / 98, 289 / 98, 1], atol=1e-15)


class TestExistenceConditions:
    def test_classical_market(self):
        mk = random_market(0, 3, 3)
        cond = check_existence_conditions(mk)
        assert cond.cond_i and cond.cond_ii

    def test_nonexist_knapsack_fails_second_condition(self):
        cond = check_existence_conditions(load_scenario("nonexist-knapsack")[0])
        assert not cond.cond_ii

    def test_negative_price_meets_second_condition(self):
        cond = check_existence_conditions(load_scenario("negative-price")[0])
        assert cond.cond_ii
        assert cond.free_good == {0: 2, 1: 2}
