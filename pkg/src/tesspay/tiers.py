"""Risk tiers and the verification rigor each one demands."""

from __future__ import annotations

import enum

from .core import Amount
from .errors import ZeroAmount

# minor units; $10 and $1,000 at 100 minor units per dollar
TIER2_FLOOR = 1_000
TIER2_CEILING = 100_000


class Tier(enum.Enum):
    Tier1 = "Tier1"
    Tier2 = "Tier2"
    Tier3 = "Tier3"

    def __str__(self):
        return self.value


def classify_tier(amount: Amount) -> Tier:
    units = amount.minor_units if isinstance(amount, Amount) else int(amount)
    if units <= 0:
        raise ZeroAmount("tier classification needs a positive amount")
    if units < TIER2_FLOOR:
        return Tier.Tier1
    if units <= TIER2_CEILING:
        return Tier.Tier2
    return Tier.Tier3


# distinct notary witnesses each receipt must carry
TIER_WITNESSES = {Tier.Tier1: 1, Tier.Tier2: 1, Tier.Tier3: 2}

FULL_NOTARY_KINDS = frozenset({"NotaryReceiptExecutor", "NotaryReceiptModel", "NotaryReceiptTool"})


def tier_proof_kinds(tier: Tier) -> frozenset:
    """Proof kinds a tier mandates regardless of the agent's contract."""
    if tier is Tier.Tier1:
        return frozenset({"ApiReceipt", "AJwtIntegrity"})
    base = FULL_NOTARY_KINDS | {"AJwtIntegrity"}
    if tier is Tier.Tier3:
        base = base | {"TeeAttestation"}
    return frozenset(base)


def required_proofs_for(contract_kinds, tier: Tier) -> frozenset:
    # Tier 1 is optimistic: the contract's notary/TEE demands are waived for an API receipt.
    if tier is Tier.Tier1:
        return tier_proof_kinds(tier)
    return frozenset(contract_kinds) | tier_proof_kinds(tier)
