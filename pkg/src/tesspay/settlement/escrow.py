"""PoTE-gated escrow state machine.

    CREATED --DepositObserved--> FUNDING_PENDING --FinalityReached--> OPEN
    CREATED | FUNDING_PENDING --Timeout--> EXPIRED
    OPEN --PoTEAnchored--> SETTLEMENT_PENDING --SettlementConfirmed--> SETTLED
    OPEN --VerificationFailed | Timeout--> REFUND_PENDING --RefundConfirmed--> REFUNDED
    SETTLEMENT_PENDING --ChallengeRaised (Tier 3)--> REFUND_PENDING
    SETTLEMENT_PENDING --ChallengeWindowElapsed (Tier 3)--> SETTLEMENT_PENDING

Tier 3 escrows may only see SettlementConfirmed after the challenge window
elapsed, and a challenge is only admissible before that.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, field

from ..core import Amount, Digest
from ..errors import IllegalTransition, RailScopeViolation
from ..tiers import Tier


class EscrowStatus(enum.Enum):
    CREATED = "CREATED"
    FUNDING_PENDING = "FUNDING_PENDING"
    OPEN = "OPEN"
    SETTLEMENT_PENDING = "SETTLEMENT_PENDING"
    SETTLED = "SETTLED"
    REFUND_PENDING = "REFUND_PENDING"
    REFUNDED = "REFUNDED"
    EXPIRED = "EXPIRED"

    def __str__(self):
        return self.value


class EscrowEvent(enum.Enum):
    DepositObserved = "DepositObserved"
    FinalityReached = "FinalityReached"
    PoTEAnchored = "PoTEAnchored"
    VerificationFailed = "VerificationFailed"
    Timeout = "Timeout"
    ChallengeRaised = "ChallengeRaised"
    ChallengeWindowElapsed = "ChallengeWindowElapsed"
    SettlementConfirmed = "SettlementConfirmed"
    RefundConfirmed = "RefundConfirmed"

    def __str__(self):
        return self.value


S, E = EscrowStatus, EscrowEvent

TERMINAL = frozenset({S.SETTLED, S.REFUNDED, S.EXPIRED})

TRANSITIONS = {
    (S.CREATED, E.DepositObserved): S.FUNDING_PENDING,
    (S.CREATED, E.Timeout): S.EXPIRED,
    (S.FUNDING_PENDING, E.FinalityReached): S.OPEN,
    (S.FUNDING_PENDING, E.Timeout): S.EXPIRED,
    (S.OPEN, E.PoTEAnchored): S.SETTLEMENT_PENDING,
    (S.OPEN, E.VerificationFailed): S.REFUND_PENDING,
    (S.OPEN, E.Timeout): S.REFUND_PENDING,
    (S.SETTLEMENT_PENDING, E.ChallengeRaised): S.REFUND_PENDING,
    (S.SETTLEMENT_PENDING, E.ChallengeWindowElapsed): S.SETTLEMENT_PENDING,
    (S.SETTLEMENT_PENDING, E.SettlementConfirmed): S.SETTLED,
    (S.REFUND_PENDING, E.RefundConfirmed): S.REFUNDED,
}

TIER3_ONLY = frozenset({E.ChallengeRaised, E.ChallengeWindowElapsed})


def next_status(status: EscrowStatus, event: EscrowEvent, tier: Tier, window_cleared: bool = False) -> EscrowStatus:
    """Pure transition function; raises IllegalTransition for every undocumented pair."""
    target = TRANSITIONS.get((status, event))
    if target is None:
        raise IllegalTransition(status, event)
    if event in TIER3_ONLY and (tier is not Tier.Tier3 or window_cleared):
        raise IllegalTransition(status, event)
    if event is E.SettlementConfirmed and tier is Tier.Tier3 and not window_cleared:
        raise IllegalTransition(status, event)
    return target


@dataclass
class EscrowRecord:
    escrow_id: str
    rail_id: str
    amount: Amount
    payer_ref: str
    payee_agent_id: str
    escrow_address: str
    tier: Tier
    timeout_tick: int
    workflow_id: str | None = None
    deposit_tx_id: str | None = None
    status: EscrowStatus = S.CREATED
    pote_root: Digest | None = None
    settlement_tx_ids: list = field(default_factory=list)  # (rail_id, tx_id)
    refund_tx_id: str | None = None
    refund_reason: str | None = None
    challenge_window_end: int | None = None
    window_cleared: bool = False
    batch_charges: list | None = None
    history: list = field(default_factory=list)  # (tick, event, status)

    @property
    def terminal(self) -> bool:
        return self.status in TERMINAL

    def apply(self, event: EscrowEvent, tick: int) -> EscrowStatus:
        new = next_status(self.status, event, self.tier, self.window_cleared)
        if event is E.ChallengeWindowElapsed:
            self.window_cleared = True
        self.status = new
        self.history.append((tick, event.value, new.value))
        return new

    def add_settlement_tx(self, rail_id: str, tx_id: str) -> None:
        if rail_id != self.rail_id:
            raise RailScopeViolation(f"escrow {self.escrow_id} lives on {self.rail_id}, not {rail_id}")
        self.settlement_tx_ids.append((rail_id, tx_id))

    def to_record(self) -> dict:
        return {
            "escrow_id": self.escrow_id,
            "rail_id": self.rail_id,
            "amount": self.amount.to_record(),
            "payer_ref": self.payer_ref,
            "payee_agent_id": self.payee_agent_id,
            "escrow_address": self.escrow_address,
            "deposit_tx_id": self.deposit_tx_id,
            "status": self.status.value,
            "pote_root": self.pote_root,
            "settlement_tx_ids": [[r, t] for r, t in self.settlement_tx_ids],
            "refund_tx_id": self.refund_tx_id,
            "refund_reason": self.refund_reason,
            "timeout_tick": self.timeout_tick,
            "tier": self.tier.value,
            "workflow_id": self.workflow_id,
            "challenge_window_end": self.challenge_window_end,
            "window_cleared": self.window_cleared,
            "history": [[t, e, s] for t, e, s in self.history],
        }
