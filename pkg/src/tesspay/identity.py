"""Identity and authorization: registries, naming, manifest anchors, A-JWT, agent contracts."""

from __future__ import annotations

import copy
import json
from dataclasses import dataclass, field
from fractions import Fraction

from .core import (
    Amount,
    Digest,
    KeyPair,
    b64url,
    b64url_decode,
    canonical_serialize,
    commit,
    keygen,
    sign,
    verify,
)
from .errors import (
    BadIssuerSig,
    BadPoP,
    ChecksumDrift,
    DuplicateAgentId,
    DuplicateDomainName,
    Expired,
    InvalidDelegationChain,
    ManifestTampered,
    NotFound,
    NotYetValid,
    Replayed,
    ScopeMandateMismatch,
    UnknownAgent,
)
from .tiers import TIER_WITNESSES, Tier, required_proofs_for
from .verification import (
    PROOF_KIND_OF_RECEIPT,
    PoTEBundle,
    check_bundle_structure,
    verify_quorum_certificate,
    verify_tee,
)

SCOPES = ("payment:escrow", "task:execute", "credentials:read")

PROOF_KINDS = frozenset({
    "NotaryReceiptExecutor",
    "NotaryReceiptModel",
    "NotaryReceiptTool",
    "TeeAttestation",
    "AJwtIntegrity",
    "ApiReceipt",
    "TelemetryHash",
})

DEFAULT_TTL = 100
ISSUER = "tesspay-idp"
AUDIENCE = "tesspay-control-plane"


def _fraction_text(x: Fraction) -> str:
    return f"{x.numerator}/{x.denominator}"


@dataclass
class AgentManifest:
    agent_id: str
    domain_name: str
    owner_pk: bytes
    capabilities: list
    endpoint_ref: str
    declared_cost: Amount
    declared_success_rate: Fraction
    system_prompt: str
    tool_config: list
    version: str

    def __post_init__(self):
        self.declared_success_rate = Fraction(self.declared_success_rate)
        if not 0 <= self.declared_success_rate <= 1:
            raise ValueError("declared_success_rate must lie in [0, 1]")

    def to_record(self) -> dict:
        return {
            "agent_id": self.agent_id,
            "domain_name": self.domain_name,
            "owner_pk": self.owner_pk.hex(),
            "capabilities": list(self.capabilities),
            "endpoint_ref": self.endpoint_ref,
            "declared_cost": self.declared_cost.to_record(),
            "declared_success_rate": _fraction_text(self.declared_success_rate),
            "system_prompt": self.system_prompt,
            "tool_config": list(self.tool_config),
            "version": self.version,
        }

    @classmethod
    def from_record(cls, rec: dict) -> "AgentManifest":
        return cls(
            agent_id=rec["agent_id"],
            domain_name=rec["domain_name"],
            owner_pk=bytes.fromhex(rec["owner_pk"]),
            capabilities=list(rec["capabilities"]),
            endpoint_ref=rec["endpoint_ref"],
            declared_cost=Amount.from_record(rec["declared_cost"]),
            declared_success_rate=Fraction(rec["declared_success_rate"]),
            system_prompt=rec["system_prompt"],
            tool_config=list(rec["tool_config"]),
            version=rec["version"],
        )


def manifest_commitment(manifest: AgentManifest) -> Digest:
    return commit(manifest.to_record())


def compute_agent_checksum(manifest: AgentManifest) -> Digest:
    """Identity checksum over the behavior-defining fields only."""
    return commit({
        "system_prompt": manifest.system_prompt,
        "tool_config": list(manifest.tool_config),
        "version": manifest.version,
    })


@dataclass(frozen=True)
class OnChainAnchor:
    agent_id: str
    owner_ref: bytes
    manifest_commitment: Digest
    anchored_at: int

    def to_record(self) -> dict:
        return {
            "agent_id": self.agent_id,
            "owner_ref": self.owner_ref.hex(),
            "manifest_commitment": self.manifest_commitment,
            "anchored_at": self.anchored_at,
        }


@dataclass(frozen=True)
class AgentContract:
    agent_id: str
    required_proof_kinds: frozenset
    min_notary_witnesses: int = 1
    extra_predicates: tuple = ()

    def __post_init__(self):
        kinds = frozenset(self.required_proof_kinds)
        if not kinds:
            raise ValueError("an agent contract must require at least one proof kind")
        unknown = kinds - PROOF_KINDS
        if unknown:
            raise ValueError(f"unknown proof kinds {sorted(unknown)}")
        if self.min_notary_witnesses < 1:
            raise ValueError("min_notary_witnesses must be positive")
        object.__setattr__(self, "required_proof_kinds", kinds)
        object.__setattr__(self, "extra_predicates", tuple(self.extra_predicates))

    def to_record(self) -> dict:
        return {
            "agent_id": self.agent_id,
            "required_proof_kinds": sorted(self.required_proof_kinds),
            "min_notary_witnesses": self.min_notary_witnesses,
            "extra_predicates": list(self.extra_predicates),
        }


# -- A-JWT ------------------------------------------------------------------


@dataclass(frozen=True)
class AJwt:
    header: dict
    claims: dict
    signature: bytes

    def signing_input(self) -> bytes:
        return signing_input(self.header, self.claims)

    def encode(self) -> str:
        return self.signing_input().decode("ascii") + "." + b64url(self.signature)

    @classmethod
    def decode(cls, compact: str) -> "AJwt":
        parts = compact.split(".")
        if len(parts) != 3:
            raise ValueError("A-JWT must have three segments")
        header = json.loads(b64url_decode(parts[0]))
        claims = json.loads(b64url_decode(parts[1]))
        return cls(header, claims, b64url_decode(parts[2]))

    @property
    def jti(self) -> str:
        return self.claims["jti"]


def signing_input(header: dict, claims: dict) -> bytes:
    return (b64url(canonical_serialize(header)) + "." + b64url(canonical_serialize(claims))).encode("ascii")


@dataclass(frozen=True)
class PopProof:
    jti: str
    request_digest: Digest
    signature: bytes


def pop_message(jti: str, request_digest: Digest) -> bytes:
    return jti.encode("utf-8") + request_digest.raw


def make_pop_proof(pop_key: KeyPair, jti: str, request_digest: Digest) -> PopProof:
    return PopProof(jti, request_digest, sign(pop_key.secret_key, pop_message(jti, request_digest)))


# -- contract evaluation ----------------------------------------------------


@dataclass(frozen=True)
class Verdict:
    passed: bool
    reasons: tuple = ()

    def to_record(self) -> dict:
        return {"passed": self.passed, "reasons": list(self.reasons)}


@dataclass
class ContractContext:
    """Trust roots and expected values a contract is evaluated against."""

    notary_keys: dict
    validator_keys: dict
    tee_authority_pk: bytes | None = None
    expected_measurement: Digest | None = None
    expected_ajwt_hash: Digest | None = None
    expected_telemetry_hash: Digest | None = None
    predicates: dict = field(default_factory=dict)


def evaluate_agent_contract(contract: AgentContract, pote: PoTEBundle, tier: Tier,
                            ctx: ContractContext) -> Verdict:
    """Check a PoTE bundle against the contract and tier; collect every failure."""
    reasons = []
    required = required_proofs_for(contract.required_proof_kinds, tier)
    witnesses = max(contract.min_notary_witnesses, TIER_WITNESSES[tier])

    present = pote.proof_kinds()
    for kind in sorted(required - present):
        reasons.append(f"{kind} missing")

    reasons.extend(check_bundle_structure(pote))

    for r in pote.receipts:
        label = PROOF_KIND_OF_RECEIPT[r.kind]
        valid = r.valid_witnesses(ctx.notary_keys)
        if valid != r.witness_ids() or len(r.witness_ids()) != len(r.witness_signatures):
            reasons.append(f"{label} carries an invalid or duplicate witness signature")
        if len(valid) < witnesses:
            reasons.append(f"{label} has {len(valid)} witnesses, {witnesses} required")
        if r.workflow_id != pote.workflow_id:
            reasons.append(f"{label} bound to another workflow")

    if pote.tee is not None and ("TeeAttestation" in required or ctx.tee_authority_pk is not None):
        if ctx.tee_authority_pk is None or not verify_tee(pote.tee, ctx.tee_authority_pk):
            reasons.append("TeeAttestation signature invalid")
        elif ctx.expected_measurement is not None and pote.tee.enclave_measurement != ctx.expected_measurement:
            reasons.append("TeeAttestation measurement mismatch")
        if pote.tee.agent_id != contract.agent_id:
            reasons.append("TeeAttestation names another agent")

    if ctx.expected_ajwt_hash is not None and pote.ajwt_integrity_hash != ctx.expected_ajwt_hash:
        reasons.append("AJwtIntegrity hash mismatch")
    if ctx.expected_telemetry_hash is not None and pote.telemetry_hash != ctx.expected_telemetry_hash:
        reasons.append("TelemetryHash mismatch")

    if not verify_quorum_certificate(pote.quorum, ctx.validator_keys):
        reasons.append("quorum certificate invalid")

    for name in contract.extra_predicates:
        check = ctx.predicates.get(name)
        if check is None:
            reasons.append(f"predicate {name} unavailable")
            continue
        problem = check(pote)
        if problem:
            reasons.append(f"predicate {name} failed: {problem}")

    return Verdict(passed=not reasons, reasons=tuple(reasons))


# -- the service ------------------------------------------------------------


class IdentityService:
    """Off-chain registry, anchor log, naming service and the A-JWT authority.

    ``mandate_kind`` maps a mandate hash to ``"intent" | "cart" | "payment"``
    (or None); the orchestration layer owns the mandate store.
    """

    def __init__(self, clock, rng, ids, audit, mandate_kind=None, default_ttl=DEFAULT_TTL):
        self._clock = clock
        self._rng = rng
        self._ids = ids
        self._audit = audit
        self._mandate_kind = mandate_kind or (lambda digest: None)
        self.default_ttl = default_ttl
        self.offchain_registry: dict = {}
        self.anchor_log: list = []
        self._latest_anchor: dict = {}
        self._names: dict = {}
        self._issuer = keygen(rng)
        self._issued: set = set()
        self._consumed: set = set()
        self.contracts: dict = {}

    @property
    def issuer_public_key(self) -> bytes:
        return self._issuer.public_key

    def secret_keys(self) -> list:
        return [self._issuer.secret_key]

    # -- registry -----------------------------------------------------------
    def _anchor(self, manifest: AgentManifest) -> OnChainAnchor:
        anchor = OnChainAnchor(manifest.agent_id, manifest.owner_pk, manifest_commitment(manifest), self._clock.now)
        self.anchor_log.append(anchor)
        self._latest_anchor[manifest.agent_id] = anchor
        return anchor

    def register_agent(self, manifest: AgentManifest) -> OnChainAnchor:
        if manifest.agent_id in self.offchain_registry:
            raise DuplicateAgentId(manifest.agent_id)
        if manifest.domain_name in self._names:
            raise DuplicateDomainName(manifest.domain_name)
        stored = copy.deepcopy(manifest)
        self.offchain_registry[stored.agent_id] = stored
        self._names[stored.domain_name] = stored.agent_id
        anchor = self._anchor(stored)
        self._audit.append("agent_registered", {}, anchor.to_record())
        return anchor

    def update_agent(self, manifest: AgentManifest) -> OnChainAnchor:
        """Replace a manifest through the registry; appends a fresh anchor."""
        old = self.offchain_registry.get(manifest.agent_id)
        if old is None:
            raise NotFound(manifest.agent_id)
        if manifest.domain_name != old.domain_name:
            if manifest.domain_name in self._names:
                raise DuplicateDomainName(manifest.domain_name)
            del self._names[old.domain_name]
            self._names[manifest.domain_name] = manifest.agent_id
        stored = copy.deepcopy(manifest)
        self.offchain_registry[stored.agent_id] = stored
        anchor = self._anchor(stored)
        self._audit.append("agent_updated", {}, anchor.to_record())
        return anchor

    def resolve_name(self, domain_name: str) -> str:
        try:
            return self._names[domain_name]
        except KeyError:
            raise NotFound(domain_name) from None

    def manifest(self, agent_id: str) -> AgentManifest:
        try:
            return self.offchain_registry[agent_id]
        except KeyError:
            raise NotFound(agent_id) from None

    def is_registered(self, agent_id: str) -> bool:
        return agent_id in self.offchain_registry

    def verify_manifest(self, agent_id: str) -> bool:
        m = self.manifest(agent_id)
        return manifest_commitment(m) == self._latest_anchor[agent_id].manifest_commitment

    def agents(self) -> list:
        return [self.offchain_registry[k] for k in sorted(self.offchain_registry)]

    def anchor_log_jsonl(self) -> bytes:
        return b"".join(canonical_serialize(a.to_record()) + b"\n" for a in self.anchor_log)

    def set_contract(self, contract: AgentContract) -> None:
        if contract.agent_id not in self.offchain_registry:
            raise UnknownAgent(contract.agent_id)
        self.contracts[contract.agent_id] = contract
        self._audit.append("contract_bound", {}, contract.to_record())

    def contract(self, agent_id: str) -> AgentContract:
        try:
            return self.contracts[agent_id]
        except KeyError:
            raise NotFound(f"no contract for {agent_id}") from None

    def control_state(self) -> dict:
        return {
            "registry": {k: v.to_record() for k, v in sorted(self.offchain_registry.items())},
            "anchors": [a.to_record() for a in self.anchor_log],
            "names": dict(sorted(self._names.items())),
            "contracts": {k: v.to_record() for k, v in sorted(self.contracts.items())},
            "issuer_pk": self._issuer.public_key.hex(),
        }

    # -- tokens -------------------------------------------------------------
    def issue_ajwt(self, user_approval: dict, agent_id: str, pop_pk: bytes, delegation_chain=None) -> AJwt:
        if agent_id not in self.offchain_registry:
            raise UnknownAgent(agent_id)
        if not self.verify_manifest(agent_id):
            raise ManifestTampered(agent_id)
        scope = user_approval["scope"]
        if scope not in SCOPES:
            raise ScopeMandateMismatch(f"unknown scope {scope!r}")
        mandate_hash = user_approval["mandate_hash"]
        if not isinstance(mandate_hash, Digest):
            mandate_hash = Digest.from_hex(mandate_hash)
        kind = self._mandate_kind(mandate_hash)
        if scope == "payment:escrow" and kind != "payment":
            raise ScopeMandateMismatch("payment scope needs a stored payment mandate")
        if kind is None:
            raise ScopeMandateMismatch("mandate_hash does not reference a stored mandate")
        chain = list(delegation_chain) if delegation_chain is not None else [agent_id]
        if not chain or len(set(chain)) != len(chain):
            raise InvalidDelegationChain(chain)

        ttl = user_approval.get("ttl_ticks", self.default_ttl)
        if ttl <= 0:
            raise ValueError("ttl_ticks must be positive")
        now = self._clock.now
        jti = self._ids.new("jti")
        header = {"alg": "EdDSA", "typ": "A-JWT"}
        claims = {
            "iss": ISSUER,
            "sub": agent_id,
            "aud": AUDIENCE,
            "scope": scope,
            "user_id": user_approval["user_id"],
            "nbf": now,
            "exp": now + ttl,
            "jti": jti,
            "cnf": bytes(pop_pk).hex(),
            "agent_checksum": compute_agent_checksum(self.offchain_registry[agent_id]).hex(),
            "delegation_chain": chain,
            "mandate_hash": mandate_hash.hex(),
        }
        token = AJwt(header, claims, sign(self._issuer.secret_key, signing_input(header, claims)))
        self._issued.add(jti)
        self._audit.append("ajwt_issued", {}, {"jti": jti, "sub": agent_id, "scope": scope,
                                                "mandate_hash": mandate_hash})
        return token

    def verify_ajwt(self, token: AJwt, pop_proof: PopProof, now: int | None = None) -> dict:
        now = self._clock.now if now is None else now
        if not verify(self._issuer.public_key, token.signing_input(), token.signature):
            raise BadIssuerSig(token.claims.get("jti"))
        claims = token.claims
        if claims.get("jti") not in self._issued:
            raise BadIssuerSig("unknown jti")
        if now < claims["nbf"]:
            raise NotYetValid(f"nbf={claims['nbf']} now={now}")
        if now >= claims["exp"]:
            raise Expired(f"exp={claims['exp']} now={now}")
        if pop_proof.jti != claims["jti"]:
            raise BadPoP("proof names another token")
        try:
            cnf = bytes.fromhex(claims["cnf"])
        except ValueError:
            raise BadPoP("malformed cnf") from None
        if not verify(cnf, pop_message(pop_proof.jti, pop_proof.request_digest), pop_proof.signature):
            raise BadPoP("proof-of-possession signature invalid")
        key = (claims["jti"], pop_proof.request_digest.hex())
        if key in self._consumed:
            raise Replayed(key[0])
        subject = self.offchain_registry.get(claims["sub"])
        if subject is None or compute_agent_checksum(subject).hex() != claims["agent_checksum"]:
            raise ChecksumDrift(claims["sub"])
        self._consumed.add(key)
        return dict(claims)
