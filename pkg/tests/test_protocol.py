import struct

import numpy as np
import pytest

from fisherlc.adm import ADMM, ADMM_NH, AMA, AdmConfig, run_adm
from fisherlc.market import COBB_DOUGLAS, Agent, ConstraintSet, UtilitySpec, random_market
from fisherlc.protocol import (BaselineAnnounce, DemandReport, Fault, PriceAnnounce, RebateNote, Terminate, decode,
                               encode, rebate_amount, replay, run_distributed)


def assert_same_run(market, config, workers, transport="queue"):
    ref_trace, ref_state = run_adm(market, config)
    trace, logs = run_distributed(market, config, workers, transport=transport)
    assert trace.to_csv() == ref_trace.to_csv()
    assert trace.converged == ref_trace.converged
    final = logs[-1].state
    np.testing.assert_array_equal(final.p, ref_state.p)
    np.testing.assert_array_equal(final.x, ref_state.x)
    np.testing.assert_array_equal(final.y, ref_state.y)
    return trace, logs


class TestFrames:
    @pytest.mark.parametrize("msg", [
        PriceAnnounce(3, [1.0, -0.5, 0.1 + 0.2]),
        BaselineAnnounce(1, 4, [0.25, 0.75], [0.0, 1.5], None),
        DemandReport(2, 0, [1e-300, 2.0]),
        RebateNote(7, 1, 3.5e-9),
        Terminate("converged"),
    ])
    def test_round_trip(self, msg):
        frame = encode(msg)
        (size,) = struct.unpack(">I", frame[:4])
        assert size == len(frame) - 4
        assert decode(frame) == msg

    def test_bad_frames(self):
        frame = encode(Terminate("x"))
        with pytest.raises(ValueError):
            decode(frame[:-1])
        with pytest.raises(ValueError):
            decode(b"\x00\x00")
        body = b'{"type":"Nope"}'
        with pytest.raises(ValueError):
            decode(struct.pack(">I", len(body)) + body)


class TestEquivalence:
    @pytest.mark.parametrize("workers", [1, 4])
    @pytest.mark.parametrize("transport", ["queue", "socket"])
    def test_linear_admm(self, workers, transport):
        assert_same_run(random_market(0, 10, 10), AdmConfig(ADMM, beta=1.0, max_iter=300), workers, transport)

    @pytest.mark.parametrize("workers", [1, 4])
    def test_cobb_douglas_ama_with_agent_prices(self, workers):
        mk = random_market(1, 6, 4, utility=COBB_DOUGLAS)
        assert_same_run(mk, AdmConfig(AMA, beta=0.3, max_iter=60, agent_prices=True), workers)

    @pytest.mark.parametrize("workers", [1, 4])
    def test_nonhomogeneous(self, workers):
        mk = random_market(0, 5, 6, [[0, 1, 2], [3, 4, 5]], 0.5)
        trace, _ = assert_same_run(mk, AdmConfig(ADMM_NH, beta=1.0, max_iter=8), workers)
        assert len(trace.lambdas) == 8

    def test_diverged_run_matches(self):
        mk = random_market(0, 3, 3)
        config = AdmConfig(AMA, beta=0.1, p0=np.array([1.0, 0.0, 1.0]), max_iter=5)
        ref, _ = run_adm(mk, config)
        trace, logs = run_distributed(mk, config, 2)
        assert trace.diverged == ref.diverged is True
        assert trace.message == ref.message
        assert isinstance(logs[-1].messages[-1], Terminate)

    def test_more_workers_than_agents(self):
        assert_same_run(random_market(2, 2, 3), AdmConfig(ADMM, max_iter=20), 4)

    def test_bad_worker_count(self):
        with pytest.raises(ValueError):
            run_distributed(random_market(0, 2, 2), AdmConfig(), 0)


class TestLogs:
    def test_message_conservation(self):
        mk = random_market(3, 7, 4)
        _, logs = run_distributed(mk, AdmConfig(ADMM, max_iter=15), 3)
        for entry in logs:
            kinds = [type(m) for m in entry.messages]
            assert kinds.count(PriceAnnounce) == 1
            assert kinds.count(DemandReport) == mk.n
            assert sorted(m.agent_id for m in entry.messages if isinstance(m, DemandReport)) == list(range(mk.n))
        assert [e.round for e in logs] == list(range(1, len(logs) + 1))

    def test_replay_rebuilds_state(self):
        mk = random_market(4, 6, 5)
        config = AdmConfig(ADMM, max_iter=25)
        _, logs = run_distributed(mk, config, 2)
        rebuilt = replay(mk, config, logs)
        live = logs[-1].state
        np.testing.assert_array_equal(rebuilt.p, live.p)
        np.testing.assert_array_equal(rebuilt.y, live.y)
        assert rebuilt.k == live.k

    def test_last_message_is_terminate(self):
        _, logs = run_distributed(random_market(0, 3, 3), AdmConfig(ADMM, max_iter=4), 2)
        assert logs[-1].messages[-1] == Terminate("iteration budget exhausted")

    @pytest.mark.parametrize("transport", ["queue", "socket"])
    def test_fault_ends_with_terminate(self, transport):
        mk = random_market(5, 6, 4)
        config = AdmConfig(ADMM, max_iter=50)
        trace, logs = run_distributed(mk, config, 3, transport=transport, fault=Fault(5, 1), timeout=5.0)
        assert not trace.converged
        assert trace.iterations == 4
        assert isinstance(logs[-1].messages[-1], Terminate)
        # completed rounds are intact: they match the in-process run
        ref, _ = run_adm(mk, AdmConfig(ADMM, max_iter=4))
        assert trace.to_csv() == ref.to_csv()
        np.testing.assert_array_equal(replay(mk, config, logs).p, logs[3].state.p)


class TestRebates:
    def setup_method(self):
        self.agent = Agent(1.0, UtilitySpec.linear([1.0, 2.0]), ConstraintSet.empty(2))

    def test_identical_bundles(self):
        x = np.array([0.2, 0.4])
        assert rebate_amount(self.agent, [1.0, 1.0], x, 1.0, x, x.copy()) == 0.0

    def test_infeasible_bundle(self):
        with pytest.raises(ValueError):
            rebate_amount(self.agent, [1.0, 1.0], np.zeros(2), 1.0, [0.0, 1.0], [-0.5, 1.0])

    def test_nonnegative_against_own_optimum(self):
        from fisherlc.adm import x_update
        rng = np.random.default_rng(0)
        for _ in range(20):
            p = rng.uniform(0.1, 2, 2)
            y = rng.uniform(0, 1, 2)
            xu = x_update(AMA, self.agent, p, y)
            xp = x_update(ADMM, self.agent, p, y, beta=1.0)
            assert rebate_amount(self.agent, p, y, 1.0, xu, xp) >= -1e-9

    def test_positive_early_and_small_at_convergence(self):
        mk = random_market(0, 10, 10)
        trace, logs = run_distributed(mk, AdmConfig(ADMM, tol=1e-6, max_iter=3000), 2, rebates=True)
        assert trace.converged
        first = [m.amount for m in logs[0].messages if isinstance(m, RebateNote)]
        last = [m.amount for m in logs[-1].messages if isinstance(m, RebateNote)]
        assert len(first) == mk.n and len(last) == mk.n
        assert max(first) > 0
        assert max(last) <= 1e-6

    def test_rebates_do_not_change_the_trace(self):
        mk = random_market(1, 4, 4)
        a, _ = run_distributed(mk, AdmConfig(ADMM, max_iter=30), 2, rebates=True)
        b, _ = run_adm(mk, AdmConfig(ADMM, max_iter=30))
        assert a.to_csv() == b.to_csv()
