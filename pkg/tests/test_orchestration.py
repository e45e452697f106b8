import random
from fractions import Fraction

import pytest
from hypothesis import given, settings, strategies as st

from helpers import manifest
from tesspay.core import Amount, keygen
from tesspay.errors import (
    BadToken,
    BudgetExceeded,
    CartRejected,
    EscrowNotOpen,
    NoAgentFound,
    NoTelemetry,
    UnknownMerchant,
    WindowExpired,
)
from tesspay.gateway.runner import FlowRun
from tesspay.identity import make_pop_proof
from tesspay.orchestration import (
    TaskRequest,
    jaccard,
    rank_agents,
    route,
    score_agent,
    seal,
    verify_mandate_chain,
)
from tesspay.settlement import EscrowStatus


def request(cap=5000, window=(0, 100), capability="shopping", rail=None):
    return TaskRequest("alice", "buy shoes", capability, Amount(cap), window, rail)


@pytest.fixture
def fac(kernel):
    r = random.Random(9)
    kernel.identity.register_agent(manifest(r, "shopper"))
    kernel.identity.register_agent(manifest(r, "cheap", declared_cost=Amount(100)))
    return kernel.facilitator


def quote(*prices, merchant="shopper"):
    return {"merchant_agent_id": merchant, "items": [{"sku": f"SKU{i}", "price": p} for i, p in enumerate(prices)]}


class TestIntake:
    def test_ids_distinct(self, fac):
        a = fac.submit_task(request())
        b = fac.submit_task(request())
        assert len(set(a.values()) | set(b.values())) == 6
        assert fac.workflow_state(a["workflow_id"]) == "CREATED"

    def test_window_expired(self, fac, kernel):
        kernel.clock.advance(10)
        with pytest.raises(WindowExpired):
            fac.submit_task(request(window=(0, 9)))
        fac.submit_task(request(window=(0, 10)))

    def test_bad_request(self):
        with pytest.raises(ValueError):
            request(cap=0)
        with pytest.raises(ValueError):
            request(window=(5, 4))

    def test_round_trip(self):
        r = request(rail="sim:beta")
        assert TaskRequest.from_record(r.to_record()) == r


class TestMandates:
    @pytest.mark.parametrize("price", [4999, 5000])
    def test_within_cap(self, fac, price):
        ids = fac.submit_task(request(cap=5000))
        ms = fac.generate_mandates(ids["session_id"], quote(price))
        assert verify_mandate_chain(ms) == []
        assert ms.amount == Amount(price)
        assert ms.cart["intent_hash"] == ms.intent["hash"] and ms.payment["cart_hash"] == ms.cart["hash"]
        assert fac.approval_valid(ids["workflow_id"])
        assert fac.workflow_state(ids["workflow_id"]) == "MANDATED"

    def test_over_cap(self, fac):
        ids = fac.submit_task(request(cap=5000))
        with pytest.raises(BudgetExceeded):
            fac.generate_mandates(ids["session_id"], quote(2500, 2501))

    def test_unknown_merchant(self, fac):
        ids = fac.submit_task(request())
        with pytest.raises(UnknownMerchant):
            fac.generate_mandates(ids["session_id"], quote(10, merchant="ghost"))

    def test_rejection(self, fac):
        ids = fac.submit_task(request())
        with pytest.raises(CartRejected):
            fac.generate_mandates(ids["session_id"], quote(10), approve=False)
        assert fac.workflow_state(ids["workflow_id"]) == "REJECTED"
        assert fac.approvals[ids["workflow_id"]]["decision"] == "rejected"

    def test_rail_default(self, fac):
        ids = fac.submit_task(request())
        assert fac.generate_mandates(ids["session_id"], quote(10)).payment["rail_id"] == "sim:alpha"
        ids = fac.submit_task(request(rail="sim:beta"))
        assert fac.generate_mandates(ids["session_id"], quote(10)).payment["rail_id"] == "sim:beta"

    def test_tamper_detection(self, fac):
        ids = fac.submit_task(request())
        ms = fac.generate_mandates(ids["session_id"], quote(100, 200))
        cart = {**ms.cart, "items": [{**ms.cart["items"][0], "price": 1}] + ms.cart["items"][1:]}
        assert "cart.hash" in verify_mandate_chain(type(ms)(ms.intent, cart, ms.payment))
        resealed = seal(cart)
        broken = verify_mandate_chain(type(ms)(ms.intent, resealed, ms.payment))
        assert "payment.cart_hash" in broken
        pay = seal({**ms.payment, "amount": 999, "cart_hash": resealed["hash"]})
        assert verify_mandate_chain(type(ms)(ms.intent, resealed, pay)) == ["payment.amount"]

    def test_mandates_anchored_in_audit(self, fac, kernel):
        ids = fac.submit_task(request())
        fac.generate_mandates(ids["session_id"], quote(10))
        kinds = [kernel.audit.payload(e.seq)["kind"] for e in kernel.audit.events if e.event_type == "mandate_anchored"]
        assert kinds == ["intent", "cart", "payment"]


class TestRanking:
    def test_jaccard(self):
        assert jaccard({"a"}, {"a"}) == 1
        assert jaccard({"a", "b"}, {"a"}) == Fraction(1, 2)
        assert jaccard(set(), set()) == 0

    def test_score_example(self, rng):
        m = manifest(rng, capabilities=["shopping"], declared_cost=Amount(1000),
                     declared_success_rate=Fraction(4, 5))
        # 1/2*1 + 3/10*4/5 + 1/5*(1 - 1000/5000)
        assert score_agent(m, request(cap=5000)) == Fraction(1, 2) + Fraction(6, 25) + Fraction(4, 25)

    def test_cost_clamped(self, rng):
        m = manifest(rng, declared_cost=Amount(99999), declared_success_rate=Fraction(0))
        assert score_agent(m, request(cap=10)) == Fraction(1, 2)

    def test_order_and_route(self, rng):
        a = manifest(rng, "a", declared_cost=Amount(300))
        b = manifest(rng, "b", declared_cost=Amount(300))
        c = manifest(rng, "c", declared_cost=Amount(100), declared_success_rate=Fraction(1, 2))
        ranked = rank_agents([c, b, a], request())
        assert [r.agent_id for r in ranked] == ["a", "b", "c"]
        assert route(ranked) == "a"
        with pytest.raises(NoAgentFound):
            route([])

    def test_route_prefers_cheaper_on_tie(self, rng):
        z = manifest(rng, "z", declared_cost=Amount(300), declared_success_rate=Fraction(1, 2))
        # b's extra success rate is exactly offset by its higher cost
        b = manifest(rng, "b", declared_cost=Amount(1300), declared_success_rate=Fraction(19, 30))
        ranked = rank_agents([z, b], request(cap=5000))
        assert ranked[0].score == ranked[1].score
        assert [r.agent_id for r in ranked] == ["b", "z"]
        assert route(ranked) == "z"

    @settings(max_examples=60, deadline=None)
    @given(st.lists(st.tuples(st.integers(0, 6000), st.integers(0, 10)), min_size=1, max_size=6, unique_by=lambda t: t),
           st.randoms(use_true_random=False))
    def test_rank_invariant_under_permutation(self, specs, r):
        rng = random.Random(1)
        ms = [manifest(rng, f"ag{i}", declared_cost=Amount(c), declared_success_rate=Fraction(s, 10))
              for i, (c, s) in enumerate(specs)]
        req = request()
        base = [x.agent_id for x in rank_agents(ms, req)]
        shuffled = list(ms)
        r.shuffle(shuffled)
        assert [x.agent_id for x in rank_agents(shuffled, req)] == base
        scores = [x.score for x in rank_agents(ms, req)]
        assert scores == sorted(scores, reverse=True)
        assert route(rank_agents(ms, req)) in base[:2]

    def test_retrieve_filters_drifted(self, fac, kernel):
        assert {m.agent_id for m in fac.retrieve_agents("shopping")} == {"shopper", "cheap"}
        kernel.identity.offchain_registry["cheap"].system_prompt = "altered"
        assert [m.agent_id for m in fac.retrieve_agents("shopping")] == ["shopper"]
        assert fac.retrieve_agents("astrology") == []


class TestDelegation:
    def envelope(self, run):
        fac = run.k.facilitator
        env = fac.build_envelope(run.ids["workflow_id"], run.token)
        env.pop_proof = make_pop_proof(run.pop, run.token.jti, env.request_digest())
        return env

    def test_never_before_open(self, ecommerce):
        run = FlowRun(ecommerce)
        assert run.prepare(deposit=False)
        with pytest.raises(EscrowNotOpen):
            run.k.facilitator.delegate(self.envelope(run))
        run.deposit()
        run.run_until(lambda: run.escrow.status is EscrowStatus.FUNDING_PENDING)
        with pytest.raises(EscrowNotOpen):
            run.k.facilitator.delegate(self.envelope(run))
        assert not any(e.event_type == "task_delegated" for e in run.k.audit.events)
        run.fund_until_open()
        handle = run.k.facilitator.delegate(self.envelope(run))
        assert handle.completed and run.workflow.state == "EXECUTING"

    def test_bad_tokens(self, ecommerce):
        run = FlowRun(ecommerce)
        run.prepare()
        run.fund_until_open()
        fac = run.k.facilitator
        env = self.envelope(run)
        env.pop_proof = None
        with pytest.raises(BadToken):
            fac.delegate(env)
        env = self.envelope(run)
        env.pop_proof = make_pop_proof(keygen(random.Random(0)), run.token.jti, env.request_digest())
        with pytest.raises(BadToken):
            fac.delegate(env)
        env = self.envelope(run)
        env.agent_id = "translator"
        with pytest.raises(BadToken):
            fac.delegate(env)
        fac.delegate(self.envelope(run))
        with pytest.raises(BadToken, match="Replayed"):
            fac.delegate(self.envelope(run))


class TestPerformance:
    def test_report(self, ecommerce):
        run = FlowRun(ecommerce)
        run.prepare()
        run.fund_until_open()
        fac = run.k.facilitator
        with pytest.raises(NoTelemetry):
            fac.evaluate_performance(run.ids["workflow_id"])
        fac.delegate(TestDelegation().envelope(run))
        rep = fac.evaluate_performance(run.ids["workflow_id"])
        samples = run.k.telemetry.samples(run.ids["workflow_id"])
        lat = sorted(s.latency_ms for s in samples)
        assert rep["latency_p50"] == lat[(len(lat) - 1) // 2]
        assert rep["success"] and rep["constraint_adherence"] and rep["quality_score"] == 100

    def test_over_budget(self, ecommerce):
        cfg = ecommerce
        for a in cfg.agents:
            a.behavior = "over_budget"
        run = FlowRun(cfg)
        run.prepare()
        run.fund_until_open()
        run.k.facilitator.delegate(TestDelegation().envelope(run))
        rep = run.k.facilitator.evaluate_performance(run.ids["workflow_id"])
        assert rep["success"] and not rep["constraint_adherence"] and rep["quality_score"] == 50


def test_ecommerce_routes_to_budget_shopper(ecommerce):
    run = FlowRun(ecommerce)
    run.prepare()
    assert run.agent_id == "shopper-budget"
    assert run.workflow.state == "AUTHORIZED"
