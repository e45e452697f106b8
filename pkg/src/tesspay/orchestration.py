"""Facilitator: task intake, mandates, agent retrieval/ranking/routing, delegation, performance."""

from __future__ import annotations

from dataclasses import dataclass, field
from fractions import Fraction

from .audit import TelemetrySample
from .core import Amount, Digest, canonical_serialize, commit, keygen, sign, total, verify
from .errors import (
    BadToken,
    BudgetExceeded,
    CartRejected,
    EscrowNotOpen,
    NoAgentFound,
    NoTelemetry,
    TokenRejected,
    UnknownMerchant,
    UnknownWorkflow,
    WindowExpired,
)

RANK_WEIGHTS = (Fraction(1, 2), Fraction(3, 10), Fraction(1, 5))


@dataclass(frozen=True)
class TaskRequest:
    user_id: str
    intent_text: str
    required_capability: str
    budget_cap: Amount
    validity_window: tuple  # (start_tick, end_tick), inclusive
    rail_preference: str | None = None

    def __post_init__(self):
        if self.budget_cap.minor_units <= 0:
            raise ValueError("budget_cap must be positive")
        start, end = self.validity_window
        if end < start:
            raise ValueError("validity window is empty")

    def to_record(self) -> dict:
        return {
            "user_id": self.user_id,
            "intent_text": self.intent_text,
            "required_capability": self.required_capability,
            "budget_cap": self.budget_cap.to_record(),
            "validity_window": list(self.validity_window),
            "rail_preference": self.rail_preference,
        }

    @classmethod
    def from_record(cls, rec: dict) -> "TaskRequest":
        return cls(
            user_id=rec["user_id"],
            intent_text=rec["intent_text"],
            required_capability=rec["required_capability"],
            budget_cap=Amount.from_record(rec["budget_cap"]),
            validity_window=tuple(rec["validity_window"]),
            rail_preference=rec.get("rail_preference"),
        )


def seal(record: dict) -> dict:
    """Return ``record`` with its ``hash`` field set to the commitment of the rest."""
    body = {k: v for k, v in record.items() if k != "hash"}
    return {**body, "hash": commit(body)}


@dataclass(frozen=True)
class MandateSet:
    intent: dict
    cart: dict
    payment: dict

    def to_record(self) -> dict:
        return {"intent": self.intent, "cart": self.cart, "payment": self.payment}

    @property
    def amount(self) -> Amount:
        return Amount.from_record(self.payment["amount"])


def verify_mandate_chain(ms: MandateSet) -> list:
    """Every broken link in the intent -> cart -> payment chain (empty when intact)."""
    broken = []
    for name in ("intent", "cart", "payment"):
        rec = getattr(ms, name)
        if seal(rec)["hash"] != rec.get("hash"):
            broken.append(f"{name}.hash")
    if ms.cart.get("intent_hash") != ms.intent.get("hash"):
        broken.append("cart.intent_hash")
    if ms.payment.get("cart_hash") != ms.cart.get("hash"):
        broken.append("payment.cart_hash")
    try:
        prices = total(Amount.from_record(i["price"]) for i in ms.cart["items"])
        if prices != ms.amount:
            broken.append("payment.amount")
    except (KeyError, TypeError, ValueError):
        broken.append("cart.items")
    return broken


@dataclass(frozen=True)
class RankedAgent:
    manifest: object
    score: Fraction

    @property
    def agent_id(self) -> str:
        return self.manifest.agent_id


@dataclass
class ExecutionEnvelope:
    task_id: str
    workflow_id: str
    agent_id: str
    scope: dict
    ajwt: object
    intent_hash: Digest
    pop_proof: object = None

    def body(self) -> dict:
        return {
            "task_id": self.task_id,
            "workflow_id": self.workflow_id,
            "agent_id": self.agent_id,
            "scope": self.scope,
            "ajwt": self.ajwt.encode(),
            "intent_hash": self.intent_hash,
        }

    def request_digest(self) -> Digest:
        return commit(self.body())


@dataclass
class ExecutionHandle:
    task_id: str
    workflow_id: str
    agent_id: str
    output: dict | None
    executor_receipt: object
    receipts: list = field(default_factory=list)

    @property
    def completed(self) -> bool:
        return self.output is not None


@dataclass
class Workflow:
    session_id: str
    workflow_id: str
    escrow_id: str
    request: TaskRequest
    state: str = "CREATED"
    mandates: MandateSet | None = None
    agent_id: str | None = None
    task_id: str | None = None
    output: dict | None = None

    def to_record(self) -> dict:
        return {
            "session_id": self.session_id,
            "workflow_id": self.workflow_id,
            "escrow_id": self.escrow_id,
            "request": self.request.to_record(),
            "state": self.state,
            "mandates": None if self.mandates is None else self.mandates.to_record(),
            "agent_id": self.agent_id,
            "task_id": self.task_id,
            "output": self.output,
        }


def jaccard(a, b) -> Fraction:
    a, b = set(a), set(b)
    union = a | b
    return Fraction(len(a & b), len(union)) if union else Fraction(0)


def score_agent(manifest, req: TaskRequest) -> Fraction:
    w_cap, w_rate, w_cost = RANK_WEIGHTS
    match = jaccard(manifest.capabilities, {req.required_capability})
    cost = Fraction(manifest.declared_cost.minor_units, req.budget_cap.minor_units)
    cost_score = min(Fraction(1), max(Fraction(0), 1 - cost))
    return w_cap * match + w_rate * manifest.declared_success_rate + w_cost * cost_score


def rank_agents(candidates, req: TaskRequest) -> list:
    """Descending score; equal scores fall back to agent_id ascending."""
    scored = [RankedAgent(m, score_agent(m, req)) for m in candidates]
    return sorted(scored, key=lambda r: (-r.score, r.agent_id))


def route(ranked) -> str:
    """Pick between the top two entries only: score, then lower cost, then agent_id."""
    ranked = list(ranked)
    if not ranked:
        raise NoAgentFound("no candidate agents")
    top = ranked[:2]
    best = min(top, key=lambda r: (-r.score, r.manifest.declared_cost.minor_units, r.agent_id))
    return best.agent_id


class Facilitator:
    """Orchestration service. Holds workflows, the mandate store and the agent roster."""

    def __init__(self, clock, rng, ids, audit, identity, verification, settlement, telemetry):
        self._clock = clock
        self._rng = rng
        self._ids = ids
        self._audit = audit
        self.identity = identity
        self.verification = verification
        self.settlement = settlement
        self.telemetry = telemetry
        self.workflows: dict = {}
        self._by_session: dict = {}
        self.mandate_store: dict = {}  # hash hex -> (kind, record)
        self.approvals: dict = {}
        self.agents: dict = {}  # agent_id -> ScriptedServiceAgent
        self._user_keys: dict = {}
        self._tasks: dict = {}

    # -- bookkeeping --------------------------------------------------------
    def workflow(self, workflow_id: str) -> Workflow:
        try:
            return self.workflows[workflow_id]
        except KeyError:
            raise UnknownWorkflow(workflow_id) from None

    def workflow_state(self, workflow_id: str) -> str:
        return self.workflow(workflow_id).state

    def mandate_kind(self, digest: Digest):
        hit = self.mandate_store.get(digest.hex())
        return None if hit is None else hit[0]

    def add_agent(self, agent) -> None:
        self.agents[agent.agent_id] = agent

    def user_public_key(self, user_id: str) -> bytes:
        return self._user_key(user_id).public_key

    def _user_key(self, user_id: str):
        if user_id not in self._user_keys:
            self._user_keys[user_id] = keygen(self._rng)
        return self._user_keys[user_id]

    def secret_keys(self) -> list:
        return [k.secret_key for k in self._user_keys.values()]

    # -- step 1: intake -----------------------------------------------------
    def submit_task(self, req: TaskRequest) -> dict:
        if req.validity_window[1] < self._clock.now:
            raise WindowExpired(f"window ended at {req.validity_window[1]}, now {self._clock.now}")
        wf = Workflow(self._ids.new("session"), self._ids.new("workflow"), self._ids.new("escrow"), req)
        self.workflows[wf.workflow_id] = wf
        self._by_session[wf.session_id] = wf
        self._audit.append("task_created", {"workflow_id": wf.workflow_id, "escrow_id": wf.escrow_id},
                           {"session_id": wf.session_id, "request": req.to_record()})
        return {"session_id": wf.session_id, "workflow_id": wf.workflow_id, "escrow_id": wf.escrow_id}

    # -- step 2: mandates ---------------------------------------------------
    def generate_mandates(self, session_id: str, quote: dict, *, approve=True,
                          payer_wallet_ref: str | None = None) -> MandateSet:
        wf = self._by_session.get(session_id)
        if wf is None:
            raise UnknownWorkflow(session_id)
        req = wf.request
        merchant = quote["merchant_agent_id"]
        if not self.identity.is_registered(merchant):
            raise UnknownMerchant(merchant)
        items = [
            {"sku": i["sku"], "description": i.get("description", ""),
             "price": Amount.from_record(i["price"]).to_record()}
            for i in quote["items"]
        ]
        amount = total((Amount.from_record(i["price"]) for i in items), req.budget_cap.currency)
        if amount > req.budget_cap:
            raise BudgetExceeded(f"{amount.minor_units} > cap {req.budget_cap.minor_units}")
        rail_id = req.rail_preference or sorted(self.settlement.rails)[0]
        refs = {"workflow_id": wf.workflow_id, "escrow_id": wf.escrow_id}

        intent = seal({
            "kind": "intent",
            "user_id": req.user_id,
            "intent_text": req.intent_text,
            "constraints": {
                "required_capability": req.required_capability,
                "budget_cap": req.budget_cap.to_record(),
                "rail_id": rail_id,
                "validity_window": list(req.validity_window),
            },
        })
        self._store("intent", intent, refs)
        cart = seal({"kind": "cart", "items": items, "merchant_agent_id": merchant, "intent_hash": intent["hash"]})
        self._store("cart", cart, refs)

        # user approval precedes the payment mandate
        decision = "approved" if approve else "rejected"
        approval_body = {"user_id": req.user_id, "cart_hash": cart["hash"], "decision": decision,
                         "tick": self._clock.now}
        sig = sign(self._user_key(req.user_id).secret_key, canonical_serialize(approval_body))
        approval = {**approval_body, "signature": sig.hex()}
        self.approvals[wf.workflow_id] = approval
        self._audit.append("cart_approval", refs, approval)
        if not approve:
            wf.state = "REJECTED"
            raise CartRejected(f"user {req.user_id} rejected cart {cart['hash']}")

        payment = seal({
            "kind": "payment",
            "amount": amount.to_record(),
            "rail_id": rail_id,
            "payer_wallet_ref": payer_wallet_ref or f"user:{req.user_id}",
            "payee_agent_id": merchant,
            "escrow_id": wf.escrow_id,
            "cart_hash": cart["hash"],
        })
        self._store("payment", payment, refs)
        wf.mandates = MandateSet(intent, cart, payment)
        wf.state = "MANDATED"
        return wf.mandates

    def _store(self, kind: str, record: dict, refs: dict) -> None:
        self.mandate_store[record["hash"].hex()] = (kind, record)
        self._audit.append("mandate_anchored", refs, {"kind": kind, "hash": record["hash"], "record": record})

    def approval_valid(self, workflow_id: str) -> bool:
        appr = self.approvals.get(workflow_id)
        if appr is None:
            return False
        body = {k: v for k, v in appr.items() if k != "signature"}
        return verify(self.user_public_key(appr["user_id"]), canonical_serialize(body), bytes.fromhex(appr["signature"]))

    # -- steps 3-4: discovery -----------------------------------------------
    def retrieve_agents(self, capability: str) -> list:
        out = []
        for m in self.identity.agents():
            if capability in m.capabilities and self.identity.verify_manifest(m.agent_id):
                out.append(m)
        return out

    rank_agents = staticmethod(rank_agents)
    route = staticmethod(route)

    def assign(self, workflow_id: str, agent_id: str) -> str:
        wf = self.workflow(workflow_id)
        if wf.task_id is not None:
            raise ValueError(f"workflow {workflow_id} already bound to task {wf.task_id}")
        wf.agent_id = agent_id
        wf.task_id = self._ids.new("task")
        self._tasks[wf.task_id] = agent_id
        self._audit.append("agent_assigned", {"workflow_id": workflow_id, "escrow_id": wf.escrow_id},
                           {"task_id": wf.task_id, "agent_id": agent_id})
        return wf.task_id

    def build_envelope(self, workflow_id: str, ajwt) -> ExecutionEnvelope:
        wf = self.workflow(workflow_id)
        req = wf.request
        scope = {
            "budget_cap": req.budget_cap.to_record(),
            "capability": req.required_capability,
            "validity": list(req.validity_window),
        }
        return ExecutionEnvelope(wf.task_id, wf.workflow_id, wf.agent_id, scope, ajwt, wf.mandates.intent["hash"])

    # -- steps 5-6: delegation ----------------------------------------------
    def delegate(self, envelope: ExecutionEnvelope, *, notaries=None, full_evidence=True) -> ExecutionHandle:
        wf = self.workflow(envelope.workflow_id)
        status = self.settlement.escrow_status(wf.escrow_id)
        if status.value != "OPEN":
            raise EscrowNotOpen(f"escrow {wf.escrow_id} is {status}")
        if self._tasks.get(envelope.task_id) != envelope.agent_id or envelope.agent_id != wf.agent_id:
            raise BadToken("envelope not bound to the assigned agent")
        if envelope.intent_hash != wf.mandates.intent["hash"]:
            raise BadToken("envelope intent does not match the intent mandate")
        if envelope.pop_proof is None:
            raise BadToken("missing proof of possession")
        try:
            claims = self.identity.verify_ajwt(envelope.ajwt, envelope.pop_proof)
        except TokenRejected as exc:
            self._audit.append("delegation_refused", {"workflow_id": wf.workflow_id, "escrow_id": wf.escrow_id},
                               {"reason": type(exc).__name__})
            raise BadToken(f"{type(exc).__name__}: {exc}") from exc
        if claims["sub"] != envelope.agent_id:
            raise BadToken("token subject is not the assigned agent")

        agent = self.agents[envelope.agent_id]
        notaries = list(notaries or self.verification.notaries[:1])
        env_bytes = canonical_serialize(envelope.body())
        exec_receipt = self.verification.notarize_exchange(
            "Executor", wf.session_id, env_bytes, agent.acknowledge(env_bytes), notaries, wf.workflow_id)
        wf.state = "EXECUTING"
        self._audit.append("task_delegated", {"workflow_id": wf.workflow_id, "escrow_id": wf.escrow_id},
                           {"task_id": envelope.task_id, "agent_id": envelope.agent_id,
                            "executor_receipt": exec_receipt.request_commitment})

        task = {
            "items": wf.mandates.cart["items"],
            "budget_cap": wf.request.budget_cap.minor_units,
            "intent_text": wf.request.intent_text,
        }
        run = agent.run(task, self._rng, full_evidence=full_evidence)
        receipts = [exec_receipt]
        for kind, req_bytes, resp_bytes in run.exchanges:
            receipts.append(self.verification.notarize_exchange(
                kind, wf.session_id, req_bytes, resp_bytes, notaries, wf.workflow_id))
        currency = wf.request.budget_cap.currency
        for label, latency, tokens, cost in run.telemetry:
            self.telemetry.record_telemetry(TelemetrySample(
                wf.workflow_id, label, latency, tokens, Amount(cost, currency), self._clock.now))
        wf.output = run.output
        return ExecutionHandle(envelope.task_id, wf.workflow_id, envelope.agent_id, run.output,
                               exec_receipt, receipts)

    # -- verification steps 5-6 ---------------------------------------------
    def evaluate_performance(self, workflow_id: str) -> dict:
        wf = self.workflow(workflow_id)
        samples = self.telemetry.samples(workflow_id)
        if not samples:
            raise NoTelemetry(workflow_id)
        latencies = sorted(s.latency_ms for s in samples)
        p50 = latencies[(len(latencies) - 1) // 2]
        cost = total((s.cost for s in samples), wf.request.budget_cap.currency)
        success = wf.output is not None and wf.output.get("status") == "completed"
        adherence = cost <= wf.request.budget_cap
        report = {
            "workflow_id": workflow_id,
            "latency_p50": p50,
            "success": success,
            "constraint_adherence": adherence,
            "total_cost": cost.to_record(),
            "quality_score": 50 * success + 50 * adherence,
        }
        self._audit.append("performance_report", {"workflow_id": workflow_id, "escrow_id": wf.escrow_id}, report)
        return report

    def control_state(self) -> dict:
        return {
            "workflows": {k: v.to_record() for k, v in self.workflows.items()},
            "mandates": {k: {"kind": kind, "record": rec} for k, (kind, rec) in self.mandate_store.items()},
            "approvals": dict(self.approvals),
        }
