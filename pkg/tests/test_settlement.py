import itertools
import random
from types import SimpleNamespace

import pytest

from oracles import ESCROW_LEGAL as LEGAL, ESCROW_TIER3_LEGAL as TIER3_LEGAL, tier_of
from tesspay.audit import AuditLedger
from tesspay.core import Amount, Clock, IdFactory, hash256
from tesspay.errors import (
    DuplicateEscrow,
    IllegalTransition,
    MixedRail,
    MixedTier,
    PoTEMissing,
    RailScopeViolation,
    UnknownRail,
    WrongState,
    ZeroAmount,
)
from tesspay.settlement import EscrowEvent, EscrowStatus, SettlementService
from tesspay.settlement.escrow import next_status
from tesspay.tiers import Tier, classify_tier

S, E = EscrowStatus, EscrowEvent

class Harness:
    def __init__(self, seed=3, **kw):
        self.clock = Clock()
        rng = random.Random(seed)
        self.anchors = {}
        self.svc = SettlementService(self.clock, rng, IdFactory(rng), AuditLedger(self.clock),
                                     anchor_lookup=self.anchors.get, **kw)
        self.n = 0

    def escrow(self, amount, rail="sim:alpha", payee="agent", fund=None, tier=None):
        self.n += 1
        eid = f"esc-{self.n}"
        payer = f"payer-{self.n}"
        fee = self.svc.rail(rail).config.flat_fee.minor_units
        self.svc.create_wallet(payer, rail, fund if fund is not None else amount + 10 * fee)
        if f"wallet:{payee}" not in self.svc.wallets:
            self.svc.create_wallet(f"wallet:{payee}", rail)
            self.svc.bind_agent_wallet(payee, f"wallet:{payee}")
        addr = self.svc.provision_escrow(rail, eid, amount=Amount(amount), payer_ref=payer,
                                         payee_agent_id=payee, tier=tier)
        return eid, payer, addr

    def deposit(self, eid, revert=False):
        rec = self.svc.escrow(eid)
        tx = self.svc.sign_transfer(rec.payer_ref, rec.escrow_address, rec.amount, revert)
        return self.svc.submit(rec.rail_id, tx)

    def tick(self, n=1):
        for _ in range(n):
            self.clock.advance(1)
            self.svc.produce_all()

    def open(self, amount, **kw):
        eid, payer, addr = self.escrow(amount, **kw)
        self.deposit(eid)
        for _ in range(30):
            if self.svc.escrow_status(eid) is S.OPEN:
                break
            self.tick()
        assert self.svc.escrow_status(eid) is S.OPEN
        return eid

    def anchor(self, eid):
        self.anchors[eid] = SimpleNamespace(merkle_root=hash256(eid.encode()))
        self.svc.transition_escrow(eid, E.PoTEAnchored)

    def finish(self, eid, limit=40):
        for _ in range(limit):
            if self.svc.escrow(eid).terminal:
                return self.svc.escrow_status(eid)
            self.tick()
        return self.svc.escrow_status(eid)


class TestTier:
    @pytest.mark.parametrize("units,tier", [(1, "Tier1"), (999, "Tier1"), (1000, "Tier2"), (100000, "Tier2"),
                                            (100001, "Tier3"), (2**63 - 1, "Tier3")])
    def test_boundaries(self, units, tier):
        assert classify_tier(Amount(units)).value == tier == tier_of(units)

    def test_zero(self):
        with pytest.raises(ZeroAmount):
            classify_tier(Amount(0))

    def test_monotone(self):
        r = random.Random(7)
        pts = sorted(r.randrange(1, 300000) for _ in range(500))
        order = [int(classify_tier(Amount(u)).value[-1]) for u in pts]
        assert order == sorted(order)


class TestEscrowTable:
    @pytest.mark.parametrize("tier", list(Tier))
    def test_exhaustive(self, tier):
        for st, ev in itertools.product(S, E):
            key = (st.value, ev.value)
            want = LEGAL.get(key) or (TIER3_LEGAL.get(key) if tier is Tier.Tier3 else None)
            if key == ("SETTLEMENT_PENDING", "SettlementConfirmed") and tier is Tier.Tier3:
                with pytest.raises(IllegalTransition):
                    next_status(st, ev, tier, window_cleared=False)
                assert next_status(st, ev, tier, window_cleared=True).value == want
                continue
            if want is None:
                with pytest.raises(IllegalTransition):
                    next_status(st, ev, tier, window_cleared=False)
            else:
                assert next_status(st, ev, tier).value == want

    def test_challenge_closed_after_window(self):
        with pytest.raises(IllegalTransition):
            next_status(S.SETTLEMENT_PENDING, E.ChallengeRaised, Tier.Tier3, window_cleared=True)

    def test_terminal_absorbing(self):
        for st in (S.SETTLED, S.REFUNDED, S.EXPIRED):
            for ev in E:
                with pytest.raises(IllegalTransition):
                    next_status(st, ev, Tier.Tier3, True)


class TestProvision:
    def test_errors(self):
        h = Harness()
        eid, _, _ = h.escrow(500)
        with pytest.raises(DuplicateEscrow):
            h.svc.provision_escrow("sim:alpha", eid, amount=Amount(5), payer_ref="payer-1", payee_agent_id="agent")
        with pytest.raises(UnknownRail):
            h.svc.provision_escrow("sim:gamma", "x", amount=Amount(5), payer_ref="payer-1", payee_agent_id="agent")

    def test_duplicate_chain_ids(self):
        with pytest.raises(ValueError):
            Harness(rails=[{"rail_id": "sim:a", "chain_id": 1}, {"rail_id": "sim:b", "chain_id": 1}])

    def test_initial_state(self):
        h = Harness()
        eid, _, addr = h.escrow(5000)
        rec = h.svc.escrow(eid)
        assert rec.status is S.CREATED and rec.tier is Tier.Tier2 and addr.startswith("0x")


class TestChain:
    def test_transfer_and_replay(self):
        h = Harness()
        h.svc.create_wallet("a", "sim:alpha", 1000)
        b = h.svc.create_wallet("b", "sim:alpha")
        tx = h.svc.sign_transfer("a", b, Amount(100))
        chain = h.svc.rail("sim:alpha")
        chain.submit(tx)
        h.tick()
        assert chain.balance(b) == 100 and chain.lookup(tx.tx_id).status == "success"
        chain.submit(tx)
        h.tick()
        assert chain.rejection(tx.tx_id) == "stale_nonce"
        assert chain.balance(b) == 100

    def test_cross_chain_replay(self):
        h = Harness()
        h.svc.create_wallet("a", "sim:alpha", 1000)
        tx = h.svc.sign_transfer("a", "0x" + "1" * 40, 10)
        h.svc.submit("sim:beta", tx)
        h.tick()
        assert h.svc.rail("sim:beta").rejection(tx.tx_id) == "chain_id_mismatch"

    def test_revert_costs_fee_only(self):
        h = Harness()
        a = h.svc.create_wallet("a", "sim:alpha", 1000)
        b = h.svc.create_wallet("b", "sim:alpha")
        tx = h.svc.sign_transfer("a", b, 100, revert_flag=True)
        h.svc.submit("sim:alpha", tx)
        h.tick()
        chain = h.svc.rail("sim:alpha")
        assert chain.lookup(tx.tx_id).status == "reverted"
        assert chain.balance(a) == 995 and chain.balance(b) == 0

    def test_nonce_gap_waits(self):
        h = Harness()
        h.svc.create_wallet("a", "sim:alpha", 1000)
        t0 = h.svc.sign_transfer("a", "0x" + "2" * 40, 1)
        t1 = h.svc.sign_transfer("a", "0x" + "2" * 40, 1)
        chain = h.svc.rail("sim:alpha")
        chain.submit(t1)
        assert h.svc.tick_rail("sim:alpha") == 1
        assert chain.lookup(t1.tx_id) is None and chain.pending == [t1]
        chain.submit(t0)
        h.svc.tick_rail("sim:alpha", 2)
        assert chain.lookup(t0.tx_id).block_height < chain.lookup(t1.tx_id).block_height

    def test_tick_zero(self):
        h = Harness()
        assert h.svc.tick_rail("sim:alpha", 0) == 0


class TestDeposit:
    @pytest.mark.parametrize("tier_amount,threshold", [(5000, 3), (150000, 12)])
    def test_finality_threshold(self, tier_amount, threshold):
        h = Harness()
        eid, _, addr = h.escrow(tier_amount)
        h.deposit(eid)
        chain = h.svc.rail("sim:alpha")
        for _ in range(threshold - 1):
            chain.produce_block(0, h.clock.stamp())
        obs = h.svc.observe_deposit("sim:alpha", addr, Amount(tier_amount))
        assert obs["confirmations"] == threshold - 1 and not obs["final"]
        assert h.svc.escrow_status(eid) is S.FUNDING_PENDING
        chain.produce_block(0, h.clock.stamp())
        obs = h.svc.observe_deposit("sim:alpha", addr, Amount(tier_amount))
        assert obs["final"] and h.svc.escrow_status(eid) is S.OPEN

    def test_forged_claim(self):
        h = Harness()
        eid, _, addr = h.escrow(5000)
        h.deposit(eid, revert=True)
        h.tick(5)
        obs = h.svc.observe_deposit("sim:alpha", addr, Amount(5000), claimed_tx_id="ab" * 32)
        assert not obs["final"] and not obs["claim_verified"]
        assert h.svc.escrow_status(eid) is S.CREATED

    def test_short_deposit_ignored(self):
        h = Harness()
        eid, payer, addr = h.escrow(5000)
        h.svc.submit("sim:alpha", h.svc.sign_transfer(payer, addr, 4999))
        h.tick(5)
        assert h.svc.escrow_status(eid) is S.CREATED

    def test_timeout_expires(self):
        h = Harness(escrow_timeout=5)
        eid, _, _ = h.escrow(5000)
        assert h.finish(eid) is S.EXPIRED


class TestSettle:
    def test_happy_path(self):
        h = Harness()
        eid = h.open(5000)
        chain = h.svc.rail("sim:alpha")
        with pytest.raises(PoTEMissing):
            h.svc.settle(eid)
        h.anchor(eid)
        tx_id = h.svc.settle(eid)
        assert h.svc.settle(eid) == tx_id
        assert h.finish(eid) is S.SETTLED
        assert chain.balance(h.svc.agent_address("agent")) == 4995
        assert h.svc.reconcile(eid).matched

    def test_settle_on_open_wrong_state(self):
        h = Harness()
        eid = h.open(5000)
        h.anchors[eid] = SimpleNamespace(merkle_root=hash256(b"r"))
        with pytest.raises(WrongState):
            h.svc.settle(eid)

    def test_anchored_event_needs_anchor(self):
        h = Harness()
        eid = h.open(5000)
        with pytest.raises(PoTEMissing):
            h.svc.transition_escrow(eid, E.PoTEAnchored)
        h.anchors[eid] = SimpleNamespace(merkle_root=hash256(b"r"))
        with pytest.raises(PoTEMissing):
            h.svc.transition_escrow(eid, E.PoTEAnchored, hash256(b"other"))

    def test_refund(self):
        h = Harness()
        eid = h.open(5000)
        payer_addr = h.svc.wallets.address_of(h.svc.escrow(eid).payer_ref)
        before = h.svc.rail("sim:alpha").balance(payer_addr)
        with pytest.raises(WrongState):
            h.svc.refund(eid, "x")
        h.svc.transition_escrow(eid, E.VerificationFailed)
        h.svc.refund(eid, "bad output")
        assert h.finish(eid) is S.REFUNDED
        assert h.svc.rail("sim:alpha").balance(payer_addr) == before + 4995
        assert h.svc.escrow(eid).refund_reason == "bad output"

    def test_settlement_confirmed_needs_final_tx(self):
        h = Harness()
        eid = h.open(5000)
        h.anchor(eid)
        with pytest.raises(WrongState):
            h.svc.transition_escrow(eid, E.SettlementConfirmed)

    def test_tier3_challenge_window(self):
        h = Harness(challenge_window=4)
        eid = h.open(150000)
        h.anchor(eid)
        with pytest.raises(WrongState):
            h.svc.settle(eid)
        h.tick(4)
        assert h.svc.escrow(eid).window_cleared
        h.svc.settle(eid)
        assert h.finish(eid) is S.SETTLED

    def test_tier3_challenge(self):
        h = Harness()
        eid = h.open(150000)
        h.anchor(eid)
        h.svc.transition_escrow(eid, E.ChallengeRaised)
        h.svc.refund(eid, "challenged")
        assert h.finish(eid) is S.REFUNDED

    def test_foreign_tx_rejected(self):
        h = Harness()
        eid = h.open(5000)
        h.svc.create_wallet("x", "sim:beta", 100)
        tx = h.svc.sign_transfer("x", "0x" + "3" * 40, 1)
        h.svc.submit("sim:beta", tx)
        h.tick()
        with pytest.raises(RailScopeViolation):
            h.svc.attach_settlement_tx(eid, "sim:beta", tx.tx_id)


class TestBatch:
    def test_ten_charges(self):
        h = Harness()
        for p in ("p1", "p2"):
            h.svc.create_wallet(f"wallet:{p}", "sim:alpha")
            h.svc.bind_agent_wallet(p, f"wallet:{p}")
        eid = h.open(600, tier=Tier.Tier1)
        h.anchor(eid)
        charges = [{"payee": "p1" if i % 2 else "p2", "amount": 50} for i in range(10)]
        h.svc.batch_settle(charges, "sim:alpha", eid)
        assert h.finish(eid) is S.SETTLED
        chain = h.svc.rail("sim:alpha")
        assert chain.balance(h.svc.agent_address("p1")) == 250
        assert chain.balance(h.svc.agent_address("p2")) == 250
        assert len(h.svc.escrow(eid).settlement_tx_ids) == 1
        assert h.svc.reconcile(eid).matched

    def test_mixed(self):
        h = Harness()
        eid = h.open(600, tier=Tier.Tier1)
        h.anchor(eid)
        with pytest.raises(MixedTier):
            h.svc.batch_settle([{"payee": "agent", "amount": 50}, {"payee": "agent", "amount": 1000}],
                               "sim:alpha", eid)
        with pytest.raises(MixedRail):
            h.svc.batch_settle([{"payee": "agent", "amount": 50, "rail_id": "sim:beta"}], "sim:alpha", eid)

    def test_needs_anchor(self):
        h = Harness()
        eid = h.open(600)
        with pytest.raises(PoTEMissing):
            h.svc.batch_settle([{"payee": "agent", "amount": 50}], "sim:alpha", eid)


class TestReconcile:
    def test_substituted_payee(self):
        h = Harness()
        eid = h.open(5000)
        h.anchor(eid)
        h.svc.faults[eid] = "0x" + "9" * 40
        h.svc.settle(eid)
        h.finish(eid)
        v = h.svc.reconcile(eid)
        assert not v.matched and v.fields == ("to",)

    def test_not_settled(self):
        h = Harness()
        eid = h.open(5000)
        with pytest.raises(WrongState):
            h.svc.reconcile(eid)


def test_conservation_under_random_traffic():
    h = Harness(seed=11)
    r = random.Random(11)
    refs = [f"w{i}" for i in range(6)]
    addrs = [h.svc.create_wallet(ref, "sim:alpha", 10_000) for ref in refs]
    chain = h.svc.rail("sim:alpha")
    for _ in range(60):
        i, j = r.sample(range(6), 2)
        tx = h.svc.sign_transfer(refs[i], addrs[j], r.randrange(0, 3000), r.random() < 0.2)
        chain.submit(tx)
        h.tick()
    assert sum(chain.accounts.values()) + chain.fees_collected == chain.supply == 60_000
    assert chain.conservation_checks >= 60


def test_wallet_snapshot_has_no_secrets():
    h = Harness()
    h.svc.create_wallet("a", "sim:alpha", 5)
    snap = repr(h.svc.wallets.snapshot()) + repr(h.svc.wallets)
    for sk in h.svc.wallets.secret_keys():
        assert sk.hex() not in snap
