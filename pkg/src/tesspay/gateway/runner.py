"""Deterministic scenario runner and threat-scenario driver."""

from __future__ import annotations

import copy
from dataclasses import dataclass, field

from ..agents import ScriptedServiceAgent
from ..audit import verify_audit_file
from ..core import Amount, b64url, canonical_serialize, hash256, keygen
from ..errors import (
    BudgetExceeded,
    ContractFailed,
    MissingProofObject,
    NoAgentFound,
    NoQuorum,
    PoTEMissing,
)
from ..identity import AgentContract, AgentManifest, ContractContext, evaluate_agent_contract, make_pop_proof
from ..settlement import EscrowEvent, EscrowStatus
from ..tiers import TIER_WITNESSES, Tier, classify_tier, required_proofs_for, tier_proof_kinds
from ..verification import ajwt_integrity_hash
from .config import RunConfig, load_scenario
from .system import Kernel

MAX_TICKS = 400
ATTACKS = ("phantom_deposit", "unverified_payout", "key_exfiltration", "cross_rail_replay")
MECHANISMS = {
    "phantom_deposit": "deposit_observation",
    "unverified_payout": "pote_gate",
    "key_exfiltration": "key_isolation",
    "cross_rail_replay": "chain_id_scoping",
}

EVENT_MODULE = {
    "agent_registered": "identity", "agent_updated": "identity", "contract_bound": "identity",
    "ajwt_issued": "identity",
    "task_created": "orchestration", "mandate_anchored": "orchestration", "cart_approval": "orchestration",
    "agent_assigned": "orchestration", "task_delegated": "orchestration", "delegation_refused": "orchestration",
    "performance_report": "orchestration",
    "verification_session_opened": "verification", "quorum_failed": "verification",
    "pote_assembled": "verification", "pote_rejected": "verification", "pote_anchored": "verification",
}

_DEFAULT_MANIFEST = {"endpoint_ref": "sim://agent", "system_prompt": "", "tool_config": [], "version": "1.0.0"}


@dataclass
class RunTranscript:
    record: dict
    kernel: Kernel = field(repr=False, compare=False, default=None)

    def to_bytes(self) -> bytes:
        return canonical_serialize(self.record)

    @property
    def digest(self) -> str:
        return hash256(self.to_bytes()).hex()

    @property
    def final_status(self) -> str | None:
        return self.record["outcome"].get("escrow_status")

    @property
    def audit_head(self) -> str:
        return self.record["audit_head"]

    @property
    def settled(self) -> bool:
        return self.final_status == "SETTLED"


def build_kernel(cfg: RunConfig) -> Kernel:
    return Kernel(cfg.seed, cfg.rails, n_validators=cfg.validators["n"],
                  byzantine_mask=cfg.validators["byzantine_mask"], n_notaries=cfg.notaries,
                  escrow_timeout=cfg.escrow_timeout, challenge_window=cfg.challenge_window)


class FlowRun:
    """One workflow driven through phases A-D, step by step.

    Attack drivers reuse the early steps and then deviate.
    """

    def __init__(self, cfg: RunConfig, kernel: Kernel | None = None):
        self.cfg = cfg
        self.k = kernel or build_kernel(cfg)
        self.outcome: dict = {}
        self.ids: dict = {}
        self.agent_id = None
        self.tier = None
        self.required = frozenset()
        self.token = None
        self.pop = None
        self.mandates = None
        self._register_agents()

    # -- setup --------------------------------------------------------------
    def _register_agents(self) -> None:
        k = self.k
        for spec in self.cfg.agents:
            rec = {**_DEFAULT_MANIFEST, **copy.deepcopy(spec.manifest)}
            if "owner_pk" not in rec:
                owner = keygen(k.rng)
                k.held_keys.append(owner)
                rec["owner_pk"] = owner.public_key.hex()
            manifest = AgentManifest.from_record(rec)
            k.identity.register_agent(manifest)
            agent = ScriptedServiceAgent(manifest, spec.behavior)
            k.facilitator.add_agent(agent)
            k.verification.register_measurement(manifest.agent_id, agent.registered_code())
            c = spec.contract
            k.identity.set_contract(AgentContract(
                manifest.agent_id, frozenset(c["required_proof_kinds"]),
                c.get("min_notary_witnesses", 1), tuple(c.get("extra_predicates", ()))))

    @property
    def workflow(self):
        return self.k.facilitator.workflow(self.ids["workflow_id"])

    @property
    def escrow(self):
        return self.k.settlement.escrow(self.ids["escrow_id"])

    @property
    def rail_id(self) -> str:
        return self.mandates.payment["rail_id"]

    @property
    def payer_ref(self) -> str:
        return self.mandates.payment["payer_wallet_ref"]

    # -- phase A: discovery and mandates -----------------------------------
    def prepare(self, deposit: bool = True) -> bool:
        """Intake, routing, mandates, A-JWT, escrow provisioning, deposit broadcast."""
        k, task = self.k, self.cfg.task
        self.ids = k.facilitator.submit_task(task)
        ranked = k.facilitator.rank_agents(k.facilitator.retrieve_agents(task.required_capability), task)
        try:
            self.agent_id = k.facilitator.route(ranked)
        except NoAgentFound:
            self.outcome["failure"] = "NoAgentFound"
            return False
        quote = {"items": self.cfg.quote_items, "merchant_agent_id": self.agent_id}
        try:
            self.mandates = k.facilitator.generate_mandates(self.ids["session_id"], quote)
        except BudgetExceeded:
            self.outcome["failure"] = "BudgetExceeded"
            return False
        k.facilitator.assign(self.ids["workflow_id"], self.agent_id)

        amount = self.mandates.amount
        self.tier = self.cfg.forced_tier or classify_tier(amount)
        contract = k.identity.contract(self.agent_id)
        self.required = required_proofs_for(contract.required_proof_kinds, self.tier)

        fee = k.settlement.rail(self.rail_id).config.flat_fee
        k.settlement.create_wallet(self.payer_ref, self.rail_id, amount.minor_units + 20 * fee.minor_units)
        for spec in self.cfg.agents:
            ref = f"agent:{spec.manifest['agent_id']}"
            k.settlement.create_wallet(ref, self.rail_id)
            k.settlement.bind_agent_wallet(spec.manifest["agent_id"], ref)

        self.pop = keygen(k.rng)
        k.held_keys.append(self.pop)
        approval = {"user_id": task.user_id, "scope": "payment:escrow",
                    "mandate_hash": self.mandates.payment["hash"], "ttl_ticks": 2 * MAX_TICKS}
        self.token = k.identity.issue_ajwt(approval, self.agent_id, self.pop.public_key)
        self.workflow.state = "AUTHORIZED"

        k.settlement.provision_escrow(self.rail_id, self.ids["escrow_id"], amount=amount,
                                      payer_ref=self.payer_ref, payee_agent_id=self.agent_id,
                                      tier=self.tier, workflow_id=self.ids["workflow_id"])
        if deposit:
            self.deposit()
        return True

    def deposit(self, revert: bool = False) -> str:
        k = self.k
        tx = k.settlement.sign_transfer(self.payer_ref, self.escrow.escrow_address, self.mandates.amount,
                                        revert_flag=revert)
        return k.settlement.submit(self.rail_id, tx)

    def run_until(self, done, limit: int = MAX_TICKS) -> bool:
        for _ in range(limit):
            if done():
                return True
            self.k.advance()
        return done()

    def fund_until_open(self) -> bool:
        return self.run_until(lambda: self.escrow.status is EscrowStatus.OPEN or self.escrow.terminal)

    # -- phases B-C: execution and verification ----------------------------
    def witnesses(self) -> list:
        contract = self.k.identity.contract(self.agent_id)
        need = max(contract.min_notary_witnesses, TIER_WITNESSES[self.tier])
        return self.k.verification.notaries[:need]

    def execute_and_verify(self) -> bool:
        """Delegate, gather evidence, assemble and anchor. True iff the PoTE anchored."""
        k, wf = self.k, self.workflow
        fac = k.facilitator
        envelope = fac.build_envelope(wf.workflow_id, self.token)
        envelope.pop_proof = make_pop_proof(self.pop, self.token.jti, envelope.request_digest())
        handle = fac.delegate(envelope, notaries=self.witnesses(), full_evidence=self.tier is not Tier.Tier1)
        if not handle.completed:
            self.outcome["failure"] = "NoOutput"
            return False

        session = k.verification.open_verification_session(
            wf.workflow_id, handle.output, {"escrow_id": wf.escrow_id, "session_id": wf.session_id})
        wf.state = "VERIFYING"
        if self.tier is not Tier.Tier1:
            session.tee = k.verification.attest_tee(self.agent_id, fac.agents[self.agent_id].runtime_code())
        report = fac.evaluate_performance(wf.workflow_id)
        telemetry_hash = k.telemetry.telemetry_session_hash(wf.workflow_id)
        try:
            bundle = k.verification.assemble_pote(session, self.token, telemetry_hash, self.required)
        except (NoQuorum, MissingProofObject) as exc:
            return self._fail(type(exc).__name__, [str(exc)])

        ctx = ContractContext(
            notary_keys=k.verification.notary_keys,
            validator_keys=k.verification.validator_keys,
            tee_authority_pk=k.verification.authority_public_key,
            expected_measurement=k.verification.expected_measurement(self.agent_id),
            expected_ajwt_hash=ajwt_integrity_hash(self.token),
            expected_telemetry_hash=telemetry_hash,
            predicates=self._predicates(handle.output, report),
        )
        verdict = evaluate_agent_contract(k.identity.contract(self.agent_id), bundle, self.tier, ctx)
        self.outcome["verdict"] = verdict.to_record()
        try:
            k.verification.anchor_pote(bundle, verdict)
        except ContractFailed as exc:
            return self._fail("ContractFailed", list(exc.reasons))
        self.outcome["pote_root"] = bundle.merkle_root.hex()
        wf.state = "VERIFIED"
        return True

    def _fail(self, kind: str, reasons: list) -> bool:
        self.outcome["failure"] = kind
        self.outcome["reasons"] = reasons
        self.workflow.state = "FAILED"
        if self.escrow.status is EscrowStatus.OPEN:
            self.k.settlement.transition_escrow(self.escrow.escrow_id, EscrowEvent.VerificationFailed)
        return False

    def _predicates(self, output: dict, report: dict) -> dict:
        cart = self.mandates.cart
        amount = self.mandates.amount.minor_units

        def output_matches_cart(_pote):
            want = [i["sku"] for i in cart["items"]]
            if output.get("items") != want:
                return f"delivered {output.get('items')} but cart holds {want}"
            return None

        def within_budget(_pote):
            if not report["constraint_adherence"]:
                return f"total cost {report['total_cost']} over cap"
            return None

        def reconcile_amounts(_pote):
            if output.get("total") != amount:
                return f"output total {output.get('total')} != payment {amount}"
            return None

        return {"output-matches-cart": output_matches_cart, "within-budget": within_budget,
                "reconcile-amounts": reconcile_amounts}

    # -- phase D: settlement -----------------------------------------------
    def settle_or_refund(self) -> None:
        k, rec = self.k, self.escrow
        if rec.status is EscrowStatus.SETTLEMENT_PENDING:
            if rec.tier is Tier.Tier3:
                if self.cfg.challenge:
                    k.advance()
                    k.settlement.transition_escrow(rec.escrow_id, EscrowEvent.ChallengeRaised)
                    self.outcome["challenge"] = "raised"
                else:
                    self.run_until(lambda: rec.window_cleared or rec.terminal)
            if rec.status is EscrowStatus.SETTLEMENT_PENDING:
                fee = k.settlement.rail(rec.rail_id).config.flat_fee
                charge = rec.amount - fee
                if rec.tier is Tier.Tier1 and classify_tier(charge) is Tier.Tier1:
                    k.settlement.batch_settle([{"payee": rec.payee_agent_id, "amount": charge}],
                                              rec.rail_id, rec.escrow_id)
                else:
                    k.settlement.settle(rec.escrow_id)
        self.run_until(lambda: rec.terminal)
        if rec.status is EscrowStatus.SETTLED:
            self.outcome["reconcile"] = k.settlement.reconcile(rec.escrow_id).to_record()
            self.workflow.state = "SETTLED"
        elif rec.status is EscrowStatus.REFUNDED:
            self.workflow.state = "REFUNDED"

    def run(self) -> "RunTranscript":
        if self.prepare():
            self.fund_until_open()
            if self.escrow.status is EscrowStatus.OPEN:
                self.execute_and_verify()
            self.settle_or_refund()
        return self.transcript()

    # -- transcript ---------------------------------------------------------
    def transcript(self) -> RunTranscript:
        k = self.k
        events = []
        for ev in k.audit.events:
            refs = {key: getattr(ev, key) for key in ("workflow_id", "escrow_id") if getattr(ev, key)}
            events.append({"tick": ev.tick, "module": EVENT_MODULE.get(ev.event_type, "settlement"),
                           "event_type": ev.event_type, "refs": refs, "digest": ev.event_hash})
        outcome = dict(self.outcome)
        if self.ids.get("escrow_id") in k.settlement.escrows:
            outcome["escrow_status"] = self.escrow.status.value
            outcome["workflow_state"] = self.workflow.state
        record = {
            "config": self.cfg.name,
            "seed": self.cfg.seed,
            "ids": dict(self.ids),
            "agent_id": self.agent_id,
            "tier": None if self.tier is None else self.tier.value,
            "required_proofs": sorted(self.required),
            "events": events,
            "outcome": outcome,
            "escrows": {eid: r.status.value for eid, r in sorted(k.settlement.escrows.items())},
            "balances": k.settlement.balances(),
            "fees": {rid: c.fees_collected for rid, c in sorted(k.settlement.rails.items())},
            "audit_head": k.audit.head_hash().hex(),
        }
        return RunTranscript(record, k)


def run_flow(config: RunConfig) -> RunTranscript:
    return FlowRun(config).run()


# -- trace checks -----------------------------------------------------------


def payout_violations(kernel: Kernel) -> list:
    """Escrow-to-payee transfers on any rail that lack an earlier anchored PoTE for that escrow."""
    s = kernel.settlement
    by_addr = {(r.rail_id, r.escrow_address): r for r in s.escrows.values()}
    bad = []
    for rail_id, chain in sorted(s.rails.items()):
        for block in chain.blocks:
            for res in block.results:
                rec = by_addr.get((rail_id, res.tx.sender))
                if rec is None or res.status != "success":
                    continue
                payer = s.wallets.address_of(rec.payer_ref)
                if all(to == payer for to, _ in res.tx.outputs):
                    continue
                anchor = kernel.verification.anchored(rec.escrow_id)
                if anchor is None or anchor.seq >= block.seq:
                    bad.append({"rail_id": rail_id, "tx_id": res.tx.tx_id, "escrow_id": rec.escrow_id,
                                "block": block.height})
    return bad


def conservation_report(kernel: Kernel) -> dict:
    out = {}
    for rail_id, c in sorted(kernel.settlement.rails.items()):
        out[rail_id] = {
            "supply": c.supply,
            "balances_plus_fees": sum(c.accounts.values()) + c.fees_collected,
            "checks": c.conservation_checks,
            "blocks": c.height,
        }
    return out


def secret_leaks(kernel: Kernel, blob: bytes) -> list:
    """Indices of secret keys whose raw, hex or base64url form occurs in ``blob``."""
    leaks = []
    lower = blob.lower()
    for i, sk in enumerate(kernel.all_secret_keys()):
        forms = (sk, sk.hex().encode(), b64url(sk).encode())
        if any(f in blob or f.lower() in lower for f in forms):
            leaks.append(i)
    return leaks


# -- attacks ----------------------------------------------------------------


def run_attack(scenario: str, seed: int = 0, config: RunConfig | None = None) -> dict:
    if scenario not in ATTACKS:
        raise ValueError(f"unknown attack {scenario!r}; choose from {ATTACKS}")
    cfg = (config or load_scenario("ecommerce")).with_seed(seed)
    blocked, evidence = _ATTACK_DRIVERS[scenario](cfg)
    return {"scenario": scenario, "seed": seed, "blocked": blocked, "mechanism": MECHANISMS[scenario],
            "evidence": evidence}


def _phantom_deposit(cfg):
    flow = FlowRun(cfg)
    flow.prepare(deposit=False)
    k, rec = flow.k, flow.escrow
    reverted = flow.deposit(revert=True)
    forged = hash256(b"forged:" + reverted.encode()).hex()
    need = k.settlement.finality_threshold(rec, rec.rail_id) + 2
    seen = set()
    claims = []
    for _ in range(need):
        k.advance()
        seen.add(rec.status.value)
        for claim in (forged, reverted):
            obs = k.settlement.observe_deposit(rec.rail_id, rec.escrow_address, rec.amount, claimed_tx_id=claim)
            claims.append(obs["claim_verified"])
            seen.add(rec.status.value)
    flow.run_until(lambda: rec.terminal)
    seen.add(rec.status.value)
    chain = k.settlement.rail(rec.rail_id)
    evidence = {
        "reverted_tx": reverted,
        "reverted_status": chain.lookup(reverted).status,
        "forged_tx_found": chain.lookup(forged) is not None,
        "claims_verified": any(claims),
        "statuses_seen": sorted(seen),
        "final_status": rec.status.value,
        "payout_violations": len(payout_violations(k)),
    }
    blocked = "OPEN" not in seen and not any(claims) and rec.status is EscrowStatus.EXPIRED
    return blocked, evidence


def _unverified_payout(cfg):
    flow = FlowRun(cfg)
    flow.prepare()
    flow.fund_until_open()
    k, rec = flow.k, flow.escrow
    errors = []
    attempts = (
        lambda: k.settlement.settle(rec.escrow_id),
        lambda: k.settlement.transition_escrow(rec.escrow_id, EscrowEvent.PoTEAnchored),
        lambda: k.settlement.batch_settle([{"payee": rec.payee_agent_id, "amount": 1}], rec.rail_id, rec.escrow_id),
    )
    for attempt in attempts:
        try:
            attempt()
            errors.append(None)
        except PoTEMissing:
            errors.append("PoTEMissing")
    held = k.settlement.rail(rec.rail_id).balance(rec.escrow_address)
    k.advance(5)
    evidence = {
        "errors": errors,
        "status": rec.status.value,
        "escrow_balance_before": held,
        "escrow_balance_after": k.settlement.rail(rec.rail_id).balance(rec.escrow_address),
        "payout_violations": len(payout_violations(k)),
    }
    blocked = (errors == ["PoTEMissing"] * 3 and rec.status is EscrowStatus.OPEN
               and evidence["escrow_balance_after"] == held and not evidence["payout_violations"])
    return blocked, evidence


def _key_exfiltration(cfg):
    transcript = run_flow(cfg)
    k = transcript.kernel
    explorer = canonical_serialize(explorer_query(k, {}))
    blob = b"\n".join([k.control_plane_snapshot(), transcript.to_bytes(), explorer])
    leaks = secret_leaks(k, blob)
    evidence = {"keys_checked": len(k.all_secret_keys()), "bytes_scanned": len(blob), "leaks": len(leaks),
                "final_status": transcript.final_status}
    return not leaks, evidence


def _cross_rail_replay(cfg):
    flow = FlowRun(cfg)
    flow.prepare(deposit=False)
    k = flow.k
    tx_id = flow.deposit()
    src = k.settlement.rail(flow.rail_id)
    k.advance()
    dst_id = next(r for r in sorted(k.settlement.rails) if r != flow.rail_id)
    dst = k.settlement.rail(dst_id)
    tx = src.lookup(tx_id).tx
    # give the sender the same address and ample funds on the target rail, so only scoping can stop it
    dst.allocate(tx.sender, 10 * (tx.value + tx.fee))
    k.settlement.submit(dst_id, tx)
    k.advance()
    evidence = {
        "source_rail": flow.rail_id,
        "target_rail": dst_id,
        "tx_id": tx_id,
        "source_status": src.lookup(tx_id).status,
        "target_included": dst.lookup(tx_id) is not None,
        "rejection": dst.rejection(tx_id),
    }
    blocked = not evidence["target_included"] and evidence["rejection"] == "chain_id_mismatch"
    return blocked, evidence


_ATTACK_DRIVERS = {
    "phantom_deposit": _phantom_deposit,
    "unverified_payout": _unverified_payout,
    "key_exfiltration": _key_exfiltration,
    "cross_rail_replay": _cross_rail_replay,
}


# -- read side --------------------------------------------------------------


def explorer_query(kernel: Kernel, flt: dict) -> list:
    keys = ("rail_id", "tx_id", "escrow_id", "workflow_id")
    want = {k: v for k, v in (flt or {}).items() if k in keys and v is not None}
    return [dict(e) for e in kernel.settlement.explorer if all(e.get(k) == v for k, v in want.items())]


def audit_export(kernel: Kernel, path):
    return kernel.audit.export_jsonl(path)


def audit_verify(path) -> bool:
    return verify_audit_file(path)


def tier_report(amount_units: int) -> dict:
    tier = classify_tier(Amount(amount_units))
    return {"amount": amount_units, "tier": tier.value, "required_proofs": sorted(tier_proof_kinds(tier)),
            "witnesses": TIER_WITNESSES[tier]}
