"""Acceptance suite: one test per criterion, each printing a PASS/FAIL line."""

import copy
import itertools
import random

import pytest

from helpers import manifest, raw_scenario
from oracles import (
    ESCROW_LEGAL,
    ESCROW_STATES,
    ESCROW_TIER3_LEGAL,
    brute_merkle,
    canonical_json,
    quorum_expected,
    replay_rail,
    tier_of,
)
from tesspay.audit import AuditLedger, verify_audit_file
from tesspay.core import Amount, Clock, IdFactory, hash256, keygen, merkle_root
from tesspay.errors import ChecksumDrift, IllegalTransition, NoQuorum, Replayed
from tesspay.gateway import ATTACKS, parse_config, payout_violations, run_attack, run_flow
from tesspay.identity import SCOPES, IdentityService, make_pop_proof
from tesspay.settlement import EscrowEvent, EscrowStatus
from tesspay.settlement.escrow import next_status
from tesspay.tiers import Tier, classify_tier
from tesspay.verification import (
    Validator,
    VerificationService,
    quorum_validate,
    recompute_root,
    verify_quorum_certificate,
)

SOUNDNESS_RUNS = 220
MISBEHAVING = ("wrong_output", "over_budget", "non_responsive", "injection_compromised")


def random_run_config(r: random.Random) -> dict:
    name = r.choice(("ecommerce", "portfolio"))
    raw = raw_scenario(name)
    raw["seed"] = r.randrange(2**32)
    for a in raw["agents"]:
        a["behavior"] = "honest" if r.random() < 0.45 else r.choice(MISBEHAVING)
    n = raw["validators"]["n"]
    f = raw["validators"]["f"]
    raw["validators"]["byzantine_mask"] = r.sample(range(n), r.randint(0, f))
    if name == "ecommerce" and r.random() < 0.3:
        raw["quote"] = {"items": [{"sku": "CABLE", "price": r.randrange(50, 1000)}]}
    if name == "portfolio":
        raw["challenge"] = r.random() < 0.25
    raw["escrow_timeout"] = 40
    return raw


@pytest.fixture(scope="module")
def soundness_runs():
    r = random.Random(20240601)
    runs = []
    for _ in range(SOUNDNESS_RUNS):
        raw = random_run_config(r)
        runs.append((raw, run_flow(parse_config(raw))))
    return runs


def expected_outcome(raw, t) -> str:
    behavior = next(a["behavior"] for a in raw["agents"] if a["manifest"]["agent_id"] == t.record["agent_id"])
    if raw.get("challenge"):
        return "REFUNDED"
    if behavior in ("wrong_output", "over_budget", "non_responsive"):
        return "REFUNDED"
    # the optimistic tier carries no enclave evidence, so a compromised enclave goes unnoticed there
    if behavior == "injection_compromised" and t.record["tier"] != "Tier1":
        return "REFUNDED"
    return "SETTLED"


def test_c01_verify_then_pay_soundness(criterion, soundness_runs):
    criterion.update(num=1, title="verify-then-pay soundness")
    violations, mismatched, masked = 0, 0, 0
    outcomes = {}
    for raw, t in soundness_runs:
        violations += len(payout_violations(t.kernel))
        masked += bool(raw["validators"]["byzantine_mask"])
        outcomes[t.final_status] = outcomes.get(t.final_status, 0) + 1
        mismatched += t.final_status != expected_outcome(raw, t)
    criterion["detail"] = (f"{len(soundness_runs)} runs ({masked} with byzantine validators), "
                           f"outcomes {dict(sorted(outcomes.items()))}, {violations} unverified payouts, "
                           f"{mismatched} unexpected outcomes")
    assert len(soundness_runs) >= 200
    assert violations == 0
    assert mismatched == 0
    criterion["ok"] = True


def test_c02_threat_matrix(criterion):
    criterion.update(num=2, title="threat matrix")
    blocked = {a: 0 for a in ATTACKS}
    for name in ATTACKS:
        for seed in range(10):
            rep = run_attack(name, seed)
            blocked[name] += rep["blocked"]
    total = sum(blocked.values())
    criterion["detail"] = f"{total}/40 blocked " + " ".join(f"{k}={v}/10" for k, v in blocked.items())
    assert total == 40
    criterion["ok"] = True


def test_c03_tier_boundaries(criterion):
    criterion.update(num=3, title="tier boundaries")
    got = {u: classify_tier(Amount(u)).value for u in (999, 1_000, 100_000, 100_001)}
    criterion["detail"] = " ".join(f"{u}->{t}" for u, t in got.items())
    assert got == {999: "Tier1", 1_000: "Tier2", 100_000: "Tier2", 100_001: "Tier3"}
    assert all(got[u] == tier_of(u) for u in got)
    criterion["ok"] = True


def test_c04_escrow_machine(criterion):
    criterion.update(num=4, title="escrow state machine")
    checked = 0
    for tier in Tier:
        for st, ev in itertools.product(EscrowStatus, EscrowEvent):
            key = (st.value, ev.value)
            want = ESCROW_LEGAL.get(key)
            if tier is Tier.Tier3:
                want = want or ESCROW_TIER3_LEGAL.get(key)
            # a tier 3 payout additionally waits for its challenge window
            cleared = tier is Tier.Tier3 and key == ("SETTLEMENT_PENDING", "SettlementConfirmed")
            if want is None:
                with pytest.raises(IllegalTransition):
                    next_status(st, ev, tier)
            else:
                assert next_status(st, ev, tier, window_cleared=cleared).value == want
            checked += 1

    seen = set()
    for raw in (raw_scenario("ecommerce"), raw_scenario("ecommerce", behavior="wrong_output")):
        t = run_flow(parse_config(raw))
        for rec in t.kernel.settlement.escrows.values():
            seen.add("CREATED")
            seen.update(status for _, _, status in rec.history)
    seen.update(run_attack("phantom_deposit", 0)["evidence"]["statuses_seen"])
    missing = sorted(set(ESCROW_STATES) - seen)
    criterion["detail"] = f"{checked} (tier, state, event) cells, {len(seen & set(ESCROW_STATES))}/8 states reached"
    assert not missing, missing
    criterion["ok"] = True


def test_c05_quorum(criterion):
    criterion.update(num=5, title="quorum arithmetic")
    subject = hash256(b"receipt set")
    cases = 0
    for n, max_size in ((4, 4), (7, 3)):
        r = random.Random(n)
        vals = [Validator(f"v{i}", keygen(r)) for i in range(n)]
        keys = {v.validator_id: v.public_key for v in vals}
        for size in range(max_size + 1):
            for subset in itertools.combinations(keys, size):
                res = quorum_validate(subject, vals, set(subset))
                certified = not isinstance(res, NoQuorum)
                assert certified == quorum_expected(n, size), (n, subset)
                if certified:
                    assert verify_quorum_certificate(res, keys)
                    assert not {vid for vid, _ in res.votes} & set(subset)
                cases += 1
    criterion["detail"] = f"{cases} byzantine subsets (16 for n=4, 64 for n=7 up to size 3)"
    assert cases == 16 + 64
    criterion["ok"] = True


def _plain(value):
    if isinstance(value, dict):
        return {k: _plain(v) for k, v in value.items()}
    if isinstance(value, (list, tuple)):
        return [_plain(v) for v in value]
    if hasattr(value, "raw"):
        return value.raw.hex()
    return value


def _oracle_leaves(bundle) -> list:
    leaves = [canonical_json(_plain(r.to_record())) for r in bundle.receipts]
    if bundle.tee is not None:
        leaves.append(canonical_json(_plain(bundle.tee.to_record())))
    leaves.append(canonical_json({"kind": "AJwtIntegrity", "digest": bundle.ajwt_integrity_hash.raw.hex()}))
    leaves.append(canonical_json({"kind": "TelemetryHash", "digest": bundle.telemetry_hash.raw.hex()}))
    return leaves


def random_bundle(r: random.Random):
    clock = Clock()
    rng = random.Random(r.randrange(2**32))
    vs = VerificationService(clock, rng, IdFactory(rng), AuditLedger(clock), is_registered=lambda a: True)
    witnesses = vs.notaries[:r.randint(1, 3)]
    kinds = ["Executor"] + ["Model"] * r.randint(0, 3) + ["Tool"] * r.randint(0, 3)
    for kind in kinds:
        clock.advance(r.randint(1, 2))
        vs.notarize_exchange(kind, "s", r.randbytes(r.randint(0, 64)), r.randbytes(r.randint(0, 64)), witnesses, "wf")
    sess = vs.open_verification_session("wf", {"status": "completed"}, {"escrow_id": "e", "session_id": "s"})
    if r.random() < 0.5:
        vs.register_measurement("agent", b"code")
        sess.tee = vs.attest_tee("agent", r.choice((b"code", b"other")))
    token = ".".join(r.randbytes(12).hex() for _ in range(3))
    return vs.assemble_pote(sess, token, hash256(r.randbytes(16)), ())


def test_c06_merkle_oracle(criterion):
    criterion.update(num=6, title="merkle/PoTE oracle equivalence")
    r = random.Random(606)
    mutations = 0
    for _ in range(100):
        bundle = random_bundle(r)
        leaves = _oracle_leaves(bundle)
        assert bundle.merkle_root.raw == brute_merkle(leaves)
        assert recompute_root(bundle) == bundle.merkle_root
        for i in range(len(leaves)):
            mutated = list(leaves)
            pos = r.randrange(len(mutated[i]))
            b = bytearray(mutated[i])
            b[pos] ^= 1 << r.randrange(8)
            mutated[i] = bytes(b)
            assert brute_merkle(mutated) != bundle.merkle_root.raw
            assert merkle_root(mutated) != bundle.merkle_root
            mutations += 1
        swapped = type(bundle)(bundle.workflow_id, bundle.escrow_id, bundle.receipts, bundle.tee,
                               bundle.ajwt_integrity_hash, hash256(b"other telemetry"),
                               bundle.merkle_root, bundle.quorum)
        assert recompute_root(swapped) != bundle.merkle_root
    criterion["detail"] = f"100 random bundles match the reference root, {mutations} single-leaf mutations all detected"
    criterion["ok"] = True


def test_c07_audit_tamper_evidence(criterion, tmp_path):
    criterion.update(num=7, title="audit tamper evidence")
    r = random.Random(707)
    clock = Clock()
    ledger = AuditLedger(clock)
    for i in range(100):
        clock.advance(r.randint(0, 2))
        ledger.append(r.choice(("escrow_transition", "mandate_anchored", "pote_anchored")),
                      {"workflow_id": f"wf-{r.randrange(5)}", "escrow_id": f"esc-{r.randrange(5)}"},
                      {"i": i, "note": r.randbytes(8).hex()})
    path = ledger.export_jsonl(tmp_path / "audit.jsonl")
    original = path.read_bytes()
    assert original.count(b"\n") == 100
    clean = verify_audit_file(path)
    detected = 0
    for _ in range(50):
        data = bytearray(original)
        pos = r.randrange(len(data))
        data[pos] = r.choice([b for b in range(256) if b != data[pos]])
        path.write_bytes(bytes(data))
        detected += not verify_audit_file(path)
    path.write_bytes(original)
    criterion["detail"] = f"clean ledger verifies={clean}, {detected}/50 single-byte mutations detected"
    assert clean and detected == 50 and verify_audit_file(path)
    criterion["ok"] = True


def _blocks(chain) -> list:
    return [{"height": b.height,
             "txs": [{"from": x.tx.sender, "fee": x.tx.fee, "status": x.status, "outputs": list(x.tx.outputs)}
                     for x in b.results]}
            for b in chain.blocks]


def test_c08_conservation(criterion, soundness_runs):
    criterion.update(num=8, title="conservation and exactly-once outcome")
    blocks_checked, escrows = 0, 0
    for raw, t in soundness_runs:
        s = t.kernel.settlement
        for chain in s.rails.values():
            for height, balances, fees, minted in replay_rail(chain.allocations, _blocks(chain)):
                assert sum(balances.values()) + fees == minted, (chain.rail_id, height)
                blocks_checked += height is not None
            assert balances == {a: v for a, v in chain.accounts.items() if v or a in balances}
            assert minted == chain.supply and fees == chain.fees_collected
        for rec in s.escrows.values():
            chain = s.rails[rec.rail_id]
            if rec.deposit_tx_id is None:
                continue
            escrows += 1
            terminal = [st for _, _, st in rec.history if st in ("SETTLED", "REFUNDED", "EXPIRED")]
            assert terminal == [rec.status.value] and rec.status.value in ("SETTLED", "REFUNDED")
            fee = chain.config.flat_fee.minor_units
            amount = rec.amount.minor_units
            payer = chain.balance(s.wallets.address_of(rec.payer_ref))
            payee = chain.balance(s.agent_address(rec.payee_agent_id))
            funded = amount + 20 * fee
            assert chain.balance(rec.escrow_address) == 0
            if rec.status is EscrowStatus.SETTLED:
                assert rec.refund_tx_id is None and len(rec.settlement_tx_ids) == 1
                assert payer == funded - amount - fee and payee == amount - fee
            else:
                assert not rec.settlement_tx_ids and rec.refund_tx_id is not None
                assert payer == funded - amount - fee + (amount - fee) and payee == 0
            assert chain.fees_collected == 2 * fee
    criterion["detail"] = (f"{blocks_checked} blocks replayed independently with no drift, "
                           f"{escrows} funded escrows each ended once with exact net deltas")
    assert escrows == len(soundness_runs)
    criterion["ok"] = True


def test_c09_determinism(criterion):
    criterion.update(num=9, title="determinism")
    raws = [
        raw_scenario("ecommerce"),
        raw_scenario("portfolio"),
        raw_scenario("ecommerce", behavior="wrong_output", seed=99),
        raw_scenario("portfolio", validators={"n": 7, "f": 2, "byzantine_mask": [1, 5]}, challenge=True),
        raw_scenario("ecommerce", quote={"items": [{"sku": "PEN", "price": 499}]}, seed=3),
    ]
    digests = set()
    for raw in raws:
        a, b = run_flow(parse_config(copy.deepcopy(raw))), run_flow(parse_config(copy.deepcopy(raw)))
        assert a.to_bytes() == b.to_bytes()
        assert a.audit_head == b.audit_head
        assert a.kernel.audit.to_jsonl_bytes() == b.kernel.audit.to_jsonl_bytes()
        digests.add(a.digest)
    criterion["detail"] = f"5 configs x 2 repetitions byte-identical, {len(digests)} distinct transcripts"
    assert len(digests) == 5
    criterion["ok"] = True


def test_c10_replay_and_drift(criterion):
    criterion.update(num=10, title="replay and proof of possession")
    r = random.Random(1010)
    clock = Clock()
    rng = random.Random(10)
    stored = {}
    svc = IdentityService(clock, rng, IdFactory(rng), AuditLedger(clock), mandate_kind=stored.get)

    replayed = drifted = 0
    for i in range(100):
        agent = manifest(rng, f"agent-{i}", system_prompt=r.randbytes(6).hex(),
                         tool_config=[r.randbytes(3).hex() for _ in range(r.randint(0, 3))])
        svc.register_agent(agent)
        scope = r.choice(sorted(SCOPES))
        mandate = hash256(r.randbytes(20))
        stored[mandate] = "payment" if scope == "payment:escrow" else r.choice(("intent", "cart", "payment"))
        chain = [agent.agent_id] + [f"helper-{j}" for j in range(r.randint(0, 2))]
        pop = keygen(rng)
        approval = {"user_id": f"user-{r.randrange(9)}", "scope": scope, "mandate_hash": mandate,
                    "ttl_ticks": r.randint(1, 200)}
        token = svc.issue_ajwt(approval, agent.agent_id, pop.public_key, chain)
        digest = hash256(r.randbytes(32))
        svc.verify_ajwt(token, make_pop_proof(pop, token.jti, digest))
        try:
            svc.verify_ajwt(token, make_pop_proof(pop, token.jti, digest))
        except Replayed:
            replayed += 1
        changed = copy.deepcopy(svc.manifest(agent.agent_id))
        field = r.choice(("system_prompt", "tool_config", "version"))
        setattr(changed, field, getattr(changed, field) + (["extra"] if field == "tool_config" else "!"))
        svc.update_agent(changed)
        try:
            svc.verify_ajwt(token, make_pop_proof(pop, token.jti, hash256(r.randbytes(32))))
        except ChecksumDrift:
            drifted += 1
    criterion["detail"] = f"100 fuzzed tokens: {replayed} Replayed on second presentation, {drifted} ChecksumDrift after drift"
    assert replayed == 100 and drifted == 100
    criterion["ok"] = True
