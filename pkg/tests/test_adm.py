import numpy as np
import pytest

from fisherlc.adm import (ADMM, ADMM_NH, AMA, AdmConfig, aggregate, agent_prices_for, ama_beta_bound,
                          constraint_matrix, dual_updates, initial_state, run_adm, violations, x_update, y_update)
from fisherlc.iop import solve_iop
from fisherlc.market import (COBB_DOUGLAS, LINEAR, Agent, ConstraintSet, Market, MarketError, UtilitySpec,
                             load_scenario, random_market)


def linear_agent(w, u, rows=()):
    return Agent(w, UtilitySpec.linear(u), ConstraintSet.from_rows(list(rows), len(u)))


def fisher(seed, n=10, m=10, utility=LINEAR):
    return random_market(seed, n, m, (), 1.0, utility=utility)


class TestXUpdate:
    def test_ama_linear_closed_form(self):
        x = x_update(AMA, linear_agent(1, [1, 2]), np.array([1.0, 1.0]), np.zeros(2))
        np.testing.assert_array_equal(x, [0, 1])

    def test_ama_cobb_douglas_closed_form(self):
        a = Agent(2.0, UtilitySpec.cobb_douglas([0.3, 0.7]), ConstraintSet.empty(2))
        np.testing.assert_allclose(x_update(AMA, a, np.array([1.0, 2.0]), np.zeros(2)), [0.6, 0.7], atol=1e-14)

    def test_ama_nonpositive_price_is_unbounded(self):
        from fisherlc.kernels import UnboundedError
        with pytest.raises(UnboundedError):
            x_update(AMA, linear_agent(1, [1, 2]), np.array([1.0, 0.0]), np.zeros(2))

    @pytest.mark.parametrize("kind", [LINEAR, COBB_DOUGLAS])
    def test_admm_large_beta_pulls_to_baseline(self, kind):
        spec = UtilitySpec.linear([1, 2]) if kind == LINEAR else UtilitySpec.cobb_douglas([0.4, 0.6])
        a = Agent(1.0, spec, ConstraintSet.empty(2))
        y = np.array([0.3, 0.5])
        x = x_update(ADMM, a, np.array([1.0, 1.0]), y, beta=1e8)
        np.testing.assert_allclose(x, y, atol=1e-7)

    @pytest.mark.parametrize("seed", range(10))
    def test_admm_linear_prox_is_stationary(self, seed):
        rng = np.random.default_rng(seed)
        u = rng.uniform(0, 1, 5)
        p = rng.uniform(0.1, 2, 5)
        y = rng.uniform(0, 1, 5)
        w, beta = rng.uniform(0.1, 1), rng.uniform(0.1, 3)
        x = x_update(ADMM, linear_agent(w, u), p, y, beta=beta)
        grad = w * u / (u @ x) - p - beta * (x - y)
        assert np.all(grad <= 1e-10)
        assert np.max(np.abs(x * grad)) <= 1e-10

    def test_rows_route_through_barrier(self):
        a = Agent(1.0, UtilitySpec.cobb_douglas([0.5, 0.5]), ConstraintSet.from_rows([([1, -1], 0)], 2))
        x = x_update(ADMM, a, np.array([1.0, 1.0]), np.array([0.5, 0.5]))
        assert x[0] <= x[1] + 1e-9

    def test_nh_effective_budget_without_rows(self):
        a = linear_agent(1, [1, 2])
        x = x_update(ADMM_NH, a, np.array([1.0, 1.0]), np.zeros(2), np.zeros(0))
        np.testing.assert_allclose(x, x_update(ADMM, a, np.array([1.0, 1.0]), np.zeros(2)), atol=1e-14)


class TestYUpdate:
    def test_cleared_market_unchanged(self):
        x = np.array([[0.2, 0.5], [0.8, 0.5]])
        np.testing.assert_allclose(y_update(x, [1.0, 1.0]), x, atol=1e-15)

    def test_two_agents_one_good(self):
        np.testing.assert_allclose(y_update(np.array([[0.7], [0.7]]), [1.0]), [[0.7 - 0.4 / 3]] * 2, atol=1e-15)

    def test_one_agent_one_good(self):
        assert y_update(np.array([[2.0]]), [1.0])[0, 0] == pytest.approx(1.5, abs=1e-15)

    @pytest.mark.parametrize("seed", range(10))
    def test_matches_least_squares(self, seed):
        rng = np.random.default_rng(seed)
        n, m = int(rng.integers(1, 6)), int(rng.integers(1, 6))
        x = rng.uniform(0, 2, (n, m))
        s = rng.uniform(0.5, 2, m)
        # maximize -|x - y|^2 - |sum_i y_i - s|^2, i.e. least squares on the stacked rows
        B = constraint_matrix(n, m).toarray()
        numeric = np.linalg.lstsq(B, np.concatenate([s, x.ravel()]), rcond=None)[0].reshape(n, m)
        np.testing.assert_allclose(y_update(x, s), numeric, atol=1e-10)


class TestDualUpdates:
    def test_zero_residual(self):
        p, _ = dual_updates([1.0, 2.0], np.array([[0.5, 1.0], [0.5, 0.0]]), [1.0, 1.0], 1.0)
        np.testing.assert_array_equal(p, [1.0, 2.0])

    def test_excess_demand_raises_price(self):
        p, _ = dual_updates([1.0], np.array([[1.1]]), [1.0], 1.0)
        assert p[0] == pytest.approx(1.1)

    def test_slack_row_leaves_r(self):
        mk = Market((linear_agent(1, [1, 1], [([1, 1], 1.0)]),), [1.0, 1.0])
        hinge = violations(mk, np.array([[0.25, 0.25]]))
        assert hinge[0][0] == 0
        _, r = dual_updates([1.0, 1.0], np.array([[0.25, 0.25]]), [1.0, 1.0], 1.0, (np.array([0.3]),), hinge)
        np.testing.assert_array_equal(r[0], [0.3])


class TestRun:
    @pytest.mark.parametrize("seed", range(3))
    def test_admm_converges_on_linear_fisher(self, seed):
        trace, _ = run_adm(fisher(seed), AdmConfig(ADMM, beta=1.0, max_iter=1000))
        assert trace.converged
        assert trace.max_residual() <= 1e-4

    def test_ama_small_step_stalls_on_linear_fisher(self):
        trace, _ = run_adm(fisher(0), AdmConfig(AMA, beta=0.1, max_iter=1000))
        assert not trace.converged

    def test_ama_rejects_nonhomogeneous(self):
        with pytest.raises(MarketError):
            run_adm(load_scenario("negative-price")[0], AdmConfig(AMA))

    def test_nonpositive_prices_give_diverged_trace(self):
        mk = fisher(0, 3, 3)
        trace, _ = run_adm(mk, AdmConfig(AMA, beta=0.1, p0=np.array([1.0, 0.0, 1.0]), max_iter=10))
        assert trace.diverged and not trace.converged
        assert trace.iterations == 0

    @pytest.mark.parametrize("seed", range(3))
    def test_converged_bundles_solve_the_agents_problems(self, seed):
        mk = fisher(seed)
        trace, state = run_adm(mk, AdmConfig(ADMM, beta=1.0, tol=1e-7, max_iter=3000))
        assert trace.converged
        for i, a in enumerate(mk.agents):
            best = solve_iop(a, state.p).objective
            assert abs(a.utility.coeffs @ state.x[i] - best) <= 1e-5 * best

    @pytest.mark.parametrize("seed", range(3))
    def test_clearing_residual_halves_its_index(self, seed):
        trace, _ = run_adm(fisher(seed), AdmConfig(ADMM, beta=1.0, max_iter=1000))
        assert trace.converged
        c = trace.clearing
        for k in range(10, trace.iterations // 2 + 1):
            assert c[2 * k - 1] < c[k - 1]

    def test_trace_csv_columns(self):
        trace, _ = run_adm(fisher(0, 2, 3), AdmConfig(ADMM, max_iter=3))
        head = trace.to_csv().splitlines()[0].split(",")
        assert head == ["iter", "p_1", "p_2", "p_3", "res_primal", "res_clearing", "res_dual", "res_violation"]
        assert len(trace.to_csv().splitlines()) == 4

    def test_residuals_nonnegative(self):
        trace, _ = run_adm(fisher(1, 4, 4), AdmConfig(ADMM, max_iter=50))
        for series in (trace.primal, trace.clearing, trace.dual, trace.violation):
            assert all(v >= 0 for v in series)

    def test_nh_run_records_lambdas(self):
        mk = random_market(0, 3, 4, [[0, 1], [2, 3]], 0.5)
        trace, state = run_adm(mk, AdmConfig(ADMM_NH, max_iter=5))
        assert len(trace.lambdas) == trace.iterations
        assert all(np.all(ri >= 0) for ri in state.r)
        head = trace.to_csv().splitlines()[0]
        assert head.endswith("lambda_1,lambda_2,lambda_3")

    def test_config_validation(self):
        with pytest.raises(ValueError):
            AdmConfig(beta=0.0)
        with pytest.raises(ValueError):
            AdmConfig(variant="nope")


class TestAgentPrices:
    @pytest.mark.parametrize("seed", range(4))
    @pytest.mark.parametrize("utility", [LINEAR, COBB_DOUGLAS])
    def test_per_agent_prices_track_market_price(self, seed, utility):
        mk = fisher(seed, 4, 3, utility)
        config = AdmConfig(AMA, beta=0.05, agent_prices=True)
        state = initial_state(mk, config)
        for _ in range(40):
            X = np.array([x_update(AMA, a, agent_prices_for(state, i), state.y[i]) for i, a in enumerate(mk.agents)])
            state, _ = aggregate(mk, config, state, X)
            assert np.max(np.abs(state.p_agent - state.p)) <= 1e-10

    def test_same_trajectory_as_shared_price(self):
        mk = fisher(2, 4, 3, COBB_DOUGLAS)
        a, _ = run_adm(mk, AdmConfig(AMA, beta=0.05, max_iter=30))
        b, _ = run_adm(mk, AdmConfig(AMA, beta=0.05, max_iter=30, agent_prices=True))
        np.testing.assert_allclose(np.array(a.prices), np.array(b.prices), atol=1e-10)


class TestBetaBound:
    def test_linear_has_no_valid_step(self):
        bound = ama_beta_bound(fisher(0, 3, 3))
        assert bound.beta_max == 0 and not bound.valid

    def test_single_agent_single_good(self):
        mk = Market((Agent(2.0, UtilitySpec.cobb_douglas([1.0]), ConstraintSet.empty(1)),), [1.0])
        bound = ama_beta_bound(mk)
        assert bound.rho == pytest.approx(2.0, rel=1e-8)
        assert bound.beta_max == pytest.approx(bound.sigma, rel=1e-12)
        assert bound.valid

    def test_half_bound_converges_on_small_market(self):
        mk = fisher(0, 2, 2, COBB_DOUGLAS)
        bound = ama_beta_bound(mk)
        assert bound.valid and 0 < bound.beta_max < np.inf
        trace, _ = run_adm(mk, AdmConfig(AMA, beta=0.5 * bound.beta_max, max_iter=5000))
        assert trace.converged

    def test_sample_count(self):
        with pytest.raises(ValueError):
            ama_beta_bound(fisher(0, 2, 2, COBB_DOUGLAS), sample_count=0)
