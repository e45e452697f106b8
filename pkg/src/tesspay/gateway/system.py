"""Kernel wiring: one clock, one PRNG, one audit ledger shared by every service."""

from __future__ import annotations

import random

from ..audit import AuditLedger, TelemetryStore
from ..core import Clock, IdFactory, canonical_serialize
from ..identity import IdentityService
from ..orchestration import Facilitator
from ..settlement import EscrowEvent, EscrowStatus, SettlementService
from ..settlement.chain import DEFAULT_RAILS
from ..verification import VerificationService


class Kernel:
    def __init__(self, seed: int, rails=DEFAULT_RAILS, *, n_validators=4, byzantine_mask=(), n_notaries=3,
                 escrow_timeout=60, challenge_window=10):
        self.seed = seed
        self.rng = random.Random(seed)
        self.clock = Clock()
        self.ids = IdFactory(self.rng)
        self.audit = AuditLedger(self.clock)
        self.telemetry = TelemetryStore()
        self.identity = IdentityService(self.clock, self.rng, self.ids, self.audit,
                                        mandate_kind=lambda d: self.facilitator.mandate_kind(d))
        self.verification = VerificationService(
            self.clock, self.rng, self.ids, self.audit,
            n_notaries=n_notaries, n_validators=n_validators, byzantine_mask=byzantine_mask,
            is_registered=self.identity.is_registered,
            workflow_state=lambda wf: self.facilitator.workflow_state(wf),
        )
        self.settlement = SettlementService(
            self.clock, self.rng, self.ids, self.audit, rails,
            anchor_lookup=self.verification.anchored,
            challenge_window=challenge_window, escrow_timeout=escrow_timeout,
        )
        self.facilitator = Facilitator(self.clock, self.rng, self.ids, self.audit, self.identity,
                                       self.verification, self.settlement, self.telemetry)
        self.verification.on_anchor = self._on_anchor
        self.held_keys: list = []  # owner and PoP keys created on behalf of agents

    def _on_anchor(self, escrow_id, root) -> None:
        rec = self.settlement.escrows.get(escrow_id)
        if rec is not None and rec.status is EscrowStatus.OPEN:
            self.settlement.transition_escrow(escrow_id, EscrowEvent.PoTEAnchored, root)

    def advance(self, n: int = 1) -> None:
        """Move logical time; each tick seals one block per rail, then the keeper reacts."""
        for _ in range(n):
            self.clock.advance(1)
            self.settlement.produce_all()
            self._keeper()

    def _keeper(self) -> None:
        # refunds are owed as soon as an escrow lands in REFUND_PENDING
        for rec in self.settlement.escrows.values():
            if rec.status is EscrowStatus.REFUND_PENDING and rec.refund_tx_id is None:
                reason = rec.history[-1][1] if rec.history else "refund"
                self.settlement.refund(rec.escrow_id, reason)

    # -- views --------------------------------------------------------------
    def control_state(self) -> dict:
        return {
            "clock": {"now": self.clock.now, "seq": self.clock.seq},
            "identity": self.identity.control_state(),
            "orchestration": self.facilitator.control_state(),
            "verification": {
                "anchors": [a.to_record() for a in self.verification.anchor_log],
                "notary_keys": {k: v.hex() for k, v in self.verification.notary_keys.items()},
                "validator_keys": {k: v.hex() for k, v in self.verification.validator_keys.items()},
                "tee_authority": self.verification.authority_public_key.hex(),
            },
            "settlement": self.settlement.control_state(),
            "telemetry": self.telemetry.to_record(),
            "audit_head": self.audit.head_hash(),
        }

    def control_plane_snapshot(self) -> bytes:
        """Every byte the control plane would persist or serve."""
        parts = [
            canonical_serialize(self.control_state()),
            self.audit.to_jsonl_bytes(),
            self.identity.anchor_log_jsonl(),
            self.verification.anchor_log_jsonl(),
        ]
        # off-chain audit payloads are served on request, so they count too
        parts += [canonical_serialize(self.audit.payload(ev.seq)) for ev in self.audit.events]
        return b"\n".join(parts)

    def all_secret_keys(self) -> list:
        keys = list(self.identity.secret_keys())
        keys += self.verification.secret_keys()
        keys += self.settlement.wallets.secret_keys()
        keys += self.facilitator.secret_keys()
        keys += [k.secret_key for k in self.held_keys]
        return keys
