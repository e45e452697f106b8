"""Evidence generation, validator quorum, PoTE assembly and anchoring.

The notary here is a co-signing witness over request/response commitments;
the TEE is a signed measurement stub. Both keep the property the settlement
plane relies on: evidence is checkable against known public keys.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

from .core import (
    Digest,
    KeyPair,
    canonical_serialize,
    commit,
    hash256,
    keygen,
    merkle_root,
    sign,
    verify,
)
from .errors import (
    Conflict,
    ContractFailed,
    MissingProofObject,
    NoNotary,
    NonCanonicalOrder,
    NoQuorum,
    UnknownAgent,
    WrongState,
)

RECEIPT_KINDS = ("Executor", "Model", "Tool", "Api")
_KIND_RANK = {k: i for i, k in enumerate(RECEIPT_KINDS)}

# proof-kind vocabulary shared with agent contracts
PROOF_KIND_OF_RECEIPT = {
    "Executor": "NotaryReceiptExecutor",
    "Model": "NotaryReceiptModel",
    "Tool": "NotaryReceiptTool",
    "Api": "ApiReceipt",
}

QC_DOMAIN = b"tesspay/qc/v1:"


@dataclass(frozen=True)
class Notary:
    notary_id: str
    keypair: KeyPair = field(repr=False)

    @property
    def public_key(self) -> bytes:
        return self.keypair.public_key


@dataclass(frozen=True)
class Validator:
    validator_id: str
    keypair: KeyPair = field(repr=False)

    @property
    def public_key(self) -> bytes:
        return self.keypair.public_key


@dataclass(frozen=True)
class NotaryReceipt:
    kind: str
    session_id: str
    workflow_id: str
    request_commitment: Digest
    response_commitment: Digest
    tick: int
    witness_signatures: tuple  # of (notary_id, signature bytes)

    def body(self) -> dict:
        return {
            "kind": self.kind,
            "session_id": self.session_id,
            "workflow_id": self.workflow_id,
            "request_commitment": self.request_commitment,
            "response_commitment": self.response_commitment,
            "tick": self.tick,
        }

    def to_record(self) -> dict:
        rec = self.body()
        rec["witness_signatures"] = [
            {"notary_id": nid, "signature": sig.hex()} for nid, sig in self.witness_signatures
        ]
        return rec

    def witness_ids(self) -> set:
        return {nid for nid, _ in self.witness_signatures}

    def valid_witnesses(self, notary_keys: dict) -> set:
        """Distinct notary ids whose signature checks out against a known key."""
        msg = canonical_serialize(self.body())
        ok = set()
        for nid, sig in self.witness_signatures:
            pk = notary_keys.get(nid)
            if pk is not None and verify(pk, msg, sig):
                ok.add(nid)
        return ok


def receipt_matches_exchange(receipt: NotaryReceipt, request_bytes: bytes, response_bytes: bytes) -> bool:
    return (
        receipt.request_commitment == hash256(request_bytes)
        and receipt.response_commitment == hash256(response_bytes)
    )


@dataclass(frozen=True)
class TeeAttestation:
    agent_id: str
    enclave_measurement: Digest
    tick: int
    report_signature: bytes

    def body(self) -> dict:
        return {
            "agent_id": self.agent_id,
            "enclave_measurement": self.enclave_measurement,
            "tick": self.tick,
        }

    def to_record(self) -> dict:
        rec = self.body()
        rec["kind"] = "TeeAttestation"
        rec["report_signature"] = self.report_signature.hex()
        return rec


def verify_tee(att: TeeAttestation, authority_pk: bytes, expected_measurement: Digest | None = None) -> bool:
    if not verify(authority_pk, canonical_serialize(att.body()), att.report_signature):
        return False
    return expected_measurement is None or att.enclave_measurement == expected_measurement


@dataclass(frozen=True)
class QuorumCertificate:
    subject_digest: Digest
    votes: tuple  # of (validator_id, signature bytes)
    n_validators: int
    f_tolerated: int

    def to_record(self) -> dict:
        return {
            "subject_digest": self.subject_digest,
            "votes": [{"validator_id": v, "signature": s.hex()} for v, s in self.votes],
            "n_validators": self.n_validators,
            "f_tolerated": self.f_tolerated,
        }


def tolerated_faults(n: int) -> int:
    if n < 4 or (n - 1) % 3:
        raise ValueError(f"validator count must be 3f+1, got {n}")
    return (n - 1) // 3


def quorum_validate(subject: Digest, validators, byzantine_mask=(), check=None):
    """One voting round over ``subject``.

    Honest validators sign the subject (after ``check(subject)`` passes, when
    given). Masked validators either sign a corrupted digest or abstain; neither
    contributes a matching vote. Returns a QuorumCertificate, or a NoQuorum
    instance (not raised).
    """
    validators = list(validators)
    f = tolerated_faults(len(validators))
    need = 2 * f + 1
    mask = set(byzantine_mask)
    honest_ok = check(subject) if check is not None else True
    votes = []
    for v in validators:
        if v.validator_id in mask:
            # corrupted-digest votes and abstentions both count zero toward the subject
            continue
        if honest_ok:
            votes.append((v.validator_id, sign(v.keypair.secret_key, QC_DOMAIN + subject.raw)))
    if len(votes) < need:
        return NoQuorum(subject, len(votes), need)
    return QuorumCertificate(subject, tuple(votes), len(validators), f)


def verify_quorum_certificate(qc: QuorumCertificate, validator_keys: dict) -> bool:
    if qc.n_validators != len(validator_keys):
        return False
    try:
        if tolerated_faults(qc.n_validators) != qc.f_tolerated:
            return False
    except ValueError:
        return False
    ids = [vid for vid, _ in qc.votes]
    if len(ids) != len(set(ids)) or len(ids) < 2 * qc.f_tolerated + 1:
        return False
    msg = QC_DOMAIN + qc.subject_digest.raw
    for vid, sig in qc.votes:
        pk = validator_keys.get(vid)
        if pk is None or not verify(pk, msg, sig):
            return False
    return True


@dataclass(frozen=True)
class PoTEBundle:
    workflow_id: str
    escrow_id: str
    receipts: tuple
    tee: TeeAttestation | None
    ajwt_integrity_hash: Digest
    telemetry_hash: Digest
    merkle_root: Digest
    quorum: QuorumCertificate

    def proof_kinds(self) -> set:
        kinds = {PROOF_KIND_OF_RECEIPT[r.kind] for r in self.receipts}
        if self.tee is not None:
            kinds.add("TeeAttestation")
        kinds.add("AJwtIntegrity")
        kinds.add("TelemetryHash")
        return kinds

    def to_record(self) -> dict:
        return {
            "workflow_id": self.workflow_id,
            "escrow_id": self.escrow_id,
            "receipts": [r.to_record() for r in self.receipts],
            "tee": None if self.tee is None else self.tee.to_record(),
            "ajwt_integrity_hash": self.ajwt_integrity_hash,
            "telemetry_hash": self.telemetry_hash,
            "merkle_root": self.merkle_root,
            "quorum": self.quorum.to_record(),
        }


def pote_leaves(receipts, tee, ajwt_integrity_hash: Digest, telemetry_hash: Digest) -> list:
    """Leaf bytes in the fixed order: receipts, TEE (if any), A-JWT hash, telemetry hash."""
    leaves = [canonical_serialize(r.to_record()) for r in receipts]
    if tee is not None:
        leaves.append(canonical_serialize(tee.to_record()))
    leaves.append(canonical_serialize({"kind": "AJwtIntegrity", "digest": ajwt_integrity_hash}))
    leaves.append(canonical_serialize({"kind": "TelemetryHash", "digest": telemetry_hash}))
    return leaves


def receipt_sort_key(r: NotaryReceipt):
    return (_KIND_RANK[r.kind], r.tick, r.request_commitment.hex())


def is_canonical_order(receipts) -> bool:
    keys = [receipt_sort_key(r) for r in receipts]
    return keys == sorted(keys)


def recompute_root(bundle: PoTEBundle) -> Digest:
    return merkle_root(pote_leaves(bundle.receipts, bundle.tee, bundle.ajwt_integrity_hash, bundle.telemetry_hash))


def check_bundle_structure(bundle: PoTEBundle) -> list:
    """Structural problems with a bundle (empty list when sound)."""
    problems = []
    if not is_canonical_order(bundle.receipts):
        problems.append("receipts not in canonical order")
    if recompute_root(bundle) != bundle.merkle_root:
        problems.append("merkle_root does not match contents")
    if bundle.quorum.subject_digest != bundle.merkle_root:
        problems.append("quorum subject is not the merkle root")
    return problems


def ajwt_integrity_hash(token) -> Digest:
    """Hash of the exact A-JWT presented for the task (its compact form)."""
    compact = token if isinstance(token, str) else token.encode()
    return hash256(compact.encode("ascii"))


@dataclass
class VerificationSession:
    session_ref: str
    workflow_id: str
    escrow_id: str
    session_id: str
    output: object
    metadata: dict
    receipts: list = field(default_factory=list)
    tee: TeeAttestation | None = None
    sealed: bool = False


@dataclass(frozen=True)
class AnchorRecord:
    workflow_id: str
    escrow_id: str
    merkle_root: Digest
    tick: int
    seq: int = 0

    def to_record(self) -> dict:
        return {
            "workflow_id": self.workflow_id,
            "escrow_id": self.escrow_id,
            "merkle_root": self.merkle_root,
            "tick": self.tick,
        }


class VerificationService:
    """Verification & audit plane: notaries, TEE authority, validator set, anchor log."""

    def __init__(self, clock, rng, ids, audit, *, n_notaries=3, n_validators=4,
                 byzantine_mask=(), is_registered=None, workflow_state=None):
        self._clock = clock
        self._ids = ids
        self._audit = audit
        self.notaries = [Notary(f"notary-{i}", keygen(rng)) for i in range(n_notaries)]
        tolerated_faults(n_validators)
        self.validators = [Validator(f"validator-{i}", keygen(rng)) for i in range(n_validators)]
        self._authority = keygen(rng)
        # mask entries may be validator indices or validator ids
        self.byzantine_mask = {self.validators[m].validator_id if isinstance(m, int) else m
                               for m in byzantine_mask}
        self._is_registered = is_registered or (lambda agent_id: True)
        self._workflow_state = workflow_state or (lambda wf: "EXECUTING")
        self._expected_measurements: dict = {}
        self._pending: dict = {}  # workflow_id -> receipts made before the session opened
        self._sessions: dict = {}
        self._session_by_wf: dict = {}
        self.anchor_log: list = []
        self._anchor_by_escrow: dict = {}
        self.on_anchor = None  # callback(escrow_id, root), wired by the kernel

    # -- trust roots --------------------------------------------------------
    @property
    def notary_keys(self) -> dict:
        return {n.notary_id: n.public_key for n in self.notaries}

    @property
    def validator_keys(self) -> dict:
        return {v.validator_id: v.public_key for v in self.validators}

    @property
    def authority_public_key(self) -> bytes:
        return self._authority.public_key

    @property
    def f_tolerated(self) -> int:
        return tolerated_faults(len(self.validators))

    def expected_measurement(self, agent_id: str):
        return self._expected_measurements.get(agent_id)

    def register_measurement(self, agent_id: str, code_bytes: bytes) -> Digest:
        m = hash256(code_bytes)
        self._expected_measurements[agent_id] = m
        return m

    def secret_keys(self) -> list:
        keys = [n.keypair.secret_key for n in self.notaries]
        keys += [v.keypair.secret_key for v in self.validators]
        keys.append(self._authority.secret_key)
        return keys

    # -- evidence -----------------------------------------------------------
    def notarize_exchange(self, kind, session_id, request_bytes, response_bytes, notaries, workflow_id=None):
        if kind not in _KIND_RANK:
            raise ValueError(f"unknown receipt kind {kind!r}")
        notaries = list(notaries)
        if not notaries:
            raise NoNotary("at least one notary must witness an exchange")
        body = {
            "kind": kind,
            "session_id": session_id,
            "workflow_id": workflow_id or "",
            "request_commitment": hash256(request_bytes),
            "response_commitment": hash256(response_bytes),
            "tick": self._clock.now,
        }
        msg = canonical_serialize(body)
        sigs = tuple((n.notary_id, sign(n.keypair.secret_key, msg)) for n in notaries)
        receipt = NotaryReceipt(**body, witness_signatures=sigs)
        if workflow_id:
            self._pending.setdefault(workflow_id, []).append(receipt)
        return receipt

    def attest_tee(self, agent_id: str, code_bytes: bytes) -> TeeAttestation:
        if not self._is_registered(agent_id):
            raise UnknownAgent(agent_id)
        body = {"agent_id": agent_id, "enclave_measurement": hash256(code_bytes), "tick": self._clock.now}
        sig = sign(self._authority.secret_key, canonical_serialize(body))
        return TeeAttestation(**body, report_signature=sig)

    def oracle_attest(self, proof_object):
        """Oracle quorum over an external proof object (e.g. an order receipt)."""
        return quorum_validate(commit(proof_object), self.validators, self.byzantine_mask)

    # -- sessions -----------------------------------------------------------
    def open_verification_session(self, workflow_id, output, metadata) -> VerificationSession:
        if workflow_id in self._session_by_wf:
            raise WrongState(f"verification session already open for {workflow_id}")
        state = self._workflow_state(workflow_id)
        if state != "EXECUTING":
            raise WrongState(f"workflow {workflow_id} is {state}, not EXECUTING")
        sess = VerificationSession(
            session_ref=self._ids.new("vsess"),
            workflow_id=workflow_id,
            escrow_id=metadata["escrow_id"],
            session_id=metadata["session_id"],
            output=output,
            metadata=dict(metadata),
        )
        sess.receipts.extend(self._pending.pop(workflow_id, []))
        self._sessions[sess.session_ref] = sess
        self._session_by_wf[workflow_id] = sess.session_ref
        self._audit.append("verification_session_opened",
                           {"workflow_id": workflow_id, "escrow_id": sess.escrow_id},
                           {"session_ref": sess.session_ref, "output": commit(_jsonable(output))})
        return sess

    def session_for(self, workflow_id: str) -> VerificationSession | None:
        ref = self._session_by_wf.get(workflow_id)
        return None if ref is None else self._sessions[ref]

    def submit_receipt(self, session: VerificationSession, receipt: NotaryReceipt) -> None:
        if session.sealed:
            raise WrongState("session already sealed")
        session.receipts.append(receipt)
        if receipt.workflow_id:
            pending = self._pending.get(receipt.workflow_id)
            if pending and receipt in pending:
                pending.remove(receipt)

    def _receipts_sound(self, receipts) -> bool:
        keys = self.notary_keys
        return all(r.valid_witnesses(keys) == r.witness_ids() and r.witness_signatures for r in receipts)

    def assemble_pote(self, session: VerificationSession, ajwt, telemetry_hash: Digest,
                      required_kinds=()) -> PoTEBundle:
        if session.sealed:
            raise WrongState("session already sealed")
        receipts = list(session.receipts)
        if not is_canonical_order(receipts):
            raise NonCanonicalOrder("receipts must arrive in executor/model/tool/api order")
        present = {PROOF_KIND_OF_RECEIPT[r.kind] for r in receipts} | {"AJwtIntegrity", "TelemetryHash"}
        if session.tee is not None:
            present.add("TeeAttestation")
        missing = sorted(set(required_kinds) - present)
        if missing:
            raise MissingProofObject(", ".join(missing))
        ih = ajwt_integrity_hash(ajwt)
        root = merkle_root(pote_leaves(receipts, session.tee, ih, telemetry_hash))
        qc = quorum_validate(root, self.validators, self.byzantine_mask,
                             check=lambda _root: self._receipts_sound(receipts))
        if isinstance(qc, NoQuorum):
            self._audit.append("quorum_failed", {"workflow_id": session.workflow_id, "escrow_id": session.escrow_id},
                               {"subject": root, "votes": qc.matching_votes, "required": qc.required})
            raise qc
        session.sealed = True
        bundle = PoTEBundle(session.workflow_id, session.escrow_id, tuple(receipts), session.tee,
                            ih, telemetry_hash, root, qc)
        self._audit.append("pote_assembled", {"workflow_id": session.workflow_id, "escrow_id": session.escrow_id},
                           {"merkle_root": root, "leaves": len(receipts) + 2 + (session.tee is not None)})
        return bundle

    # -- anchoring ----------------------------------------------------------
    def anchor_pote(self, bundle: PoTEBundle, verdict) -> AnchorRecord:
        refs = {"workflow_id": bundle.workflow_id, "escrow_id": bundle.escrow_id}
        if not verdict.passed:
            self._audit.append("pote_rejected", refs, {"merkle_root": bundle.merkle_root,
                                                        "reasons": list(verdict.reasons)})
            raise ContractFailed(verdict.reasons)
        existing = self._anchor_by_escrow.get(bundle.escrow_id)
        if existing is not None:
            if existing.merkle_root == bundle.merkle_root and existing.workflow_id == bundle.workflow_id:
                return existing
            raise Conflict(f"escrow {bundle.escrow_id} already anchored to a different root")
        rec = AnchorRecord(bundle.workflow_id, bundle.escrow_id, bundle.merkle_root, self._clock.now,
                           self._clock.stamp())
        self.anchor_log.append(rec)
        self._anchor_by_escrow[bundle.escrow_id] = rec
        self._audit.append("pote_anchored", refs, rec.to_record())
        if self.on_anchor is not None:
            self.on_anchor(bundle.escrow_id, bundle.merkle_root)
        return rec

    def anchored(self, escrow_id: str) -> AnchorRecord | None:
        return self._anchor_by_escrow.get(escrow_id)

    def anchor_log_jsonl(self) -> bytes:
        return b"".join(canonical_serialize(a.to_record()) + b"\n" for a in self.anchor_log)


def _jsonable(value):
    if value is None or isinstance(value, (str, int, bool, Digest)):
        return value
    if isinstance(value, dict):
        return {str(k): _jsonable(v) for k, v in value.items()}
    if isinstance(value, (list, tuple)):
        return [_jsonable(v) for v in value]
    if hasattr(value, "to_record"):
        return value.to_record()
    return repr(value)


def with_receipts(bundle: PoTEBundle, receipts) -> PoTEBundle:
    """Copy of ``bundle`` with a different receipt list (roots left stale)."""
    return replace(bundle, receipts=tuple(receipts))
