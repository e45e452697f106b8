"""Rail adapter + escrow contract host: the settlement plane's lifecycle operations."""

from __future__ import annotations

from dataclasses import dataclass

from ..core import Amount
from ..errors import (
    DuplicateEscrow,
    InsufficientEscrowBalance,
    MixedRail,
    MixedTier,
    PoTEMissing,
    RailScopeViolation,
    TxNotFound,
    UnknownEscrow,
    UnknownRail,
    WrongState,
)
from ..tiers import Tier, classify_tier
from .chain import DEFAULT_RAILS, RailConfig, SimChain
from .escrow import EscrowEvent, EscrowRecord, EscrowStatus, next_status
from .wallet import WalletStore

DEFAULT_CHALLENGE_WINDOW = 10
DEFAULT_ESCROW_TIMEOUT = 60


@dataclass(frozen=True)
class Reconciliation:
    matched: bool
    fields: tuple = ()

    def to_record(self) -> dict:
        return {"verdict": "match" if self.matched else "mismatch", "fields": list(self.fields)}


def _units(amount) -> int:
    return amount.minor_units if isinstance(amount, Amount) else int(amount)


class SettlementService:
    """Owns every rail, the wallet store and the escrow records.

    ``anchor_lookup(escrow_id)`` returns the anchored PoTE record (or None); it
    is the only path by which an escrow may move toward payout.
    """

    def __init__(self, clock, rng, ids, audit, rails=DEFAULT_RAILS, *, anchor_lookup=None,
                 challenge_window=DEFAULT_CHALLENGE_WINDOW, escrow_timeout=DEFAULT_ESCROW_TIMEOUT):
        self._clock = clock
        self._ids = ids
        self._audit = audit
        rails = [r if isinstance(r, RailConfig) else RailConfig.from_record(r) for r in rails]
        chain_ids = [r.chain_id for r in rails]
        if len(set(chain_ids)) != len(chain_ids):
            raise ValueError("chain_id must be unique across rails")
        if len({r.rail_id for r in rails}) != len(rails):
            raise ValueError("duplicate rail_id")
        self.rails = {r.rail_id: SimChain(r) for r in rails}
        self.wallets = WalletStore(rng)
        self.escrows: dict = {}
        self._by_address: dict = {}
        self._agent_wallets: dict = {}
        self.explorer: list = []
        self._anchor_lookup = anchor_lookup or (lambda escrow_id: None)
        self.challenge_window = challenge_window
        self.escrow_timeout = escrow_timeout
        self.faults: dict = {}  # escrow_id -> substituted payee address (fault injection)
        self._pending_settle: dict = {}
        self._pending_refund: dict = {}

    # -- lookups ------------------------------------------------------------
    def rail(self, rail_id: str) -> SimChain:
        try:
            return self.rails[rail_id]
        except KeyError:
            raise UnknownRail(rail_id) from None

    def escrow(self, escrow_id: str) -> EscrowRecord:
        try:
            return self.escrows[escrow_id]
        except KeyError:
            raise UnknownEscrow(escrow_id) from None

    def escrow_status(self, escrow_id: str) -> EscrowStatus:
        return self.escrow(escrow_id).status

    def _wallet_ref(self, escrow_id: str) -> str:
        return f"escrow:{escrow_id}"

    # -- wallets ------------------------------------------------------------
    def create_wallet(self, wallet_ref: str, rail_id: str, funding: int = 0) -> str:
        chain = self.rail(rail_id)
        addr = self.wallets.create(wallet_ref, chain.config)
        if funding:
            chain.allocate(addr, _units(funding))
        return addr

    def bind_agent_wallet(self, agent_id: str, wallet_ref: str) -> None:
        self.wallets.address_of(wallet_ref)
        self._agent_wallets[agent_id] = wallet_ref

    def agent_address(self, agent_id: str) -> str:
        return self.wallets.address_of(self._agent_wallets[agent_id])

    def sign_transfer(self, wallet_ref, to_address, amount, revert_flag=False):
        return self.wallets.sign_transfer(wallet_ref, to_address, amount, revert_flag)

    def submit(self, rail_id: str, tx) -> str:
        return self.rail(rail_id).submit(tx)

    # -- escrow lifecycle ---------------------------------------------------
    def provision_escrow(self, rail_id: str, escrow_id: str, *, amount, payer_ref: str,
                         payee_agent_id: str, tier: Tier | None = None, workflow_id: str | None = None,
                         timeout_ticks: int | None = None) -> str:
        self.rail(rail_id)
        if escrow_id in self.escrows:
            raise DuplicateEscrow(escrow_id)
        amount = amount if isinstance(amount, Amount) else Amount(int(amount))
        addr = self.wallets.create(self._wallet_ref(escrow_id), self.rails[rail_id].config)
        rec = EscrowRecord(
            escrow_id=escrow_id,
            rail_id=rail_id,
            amount=amount,
            payer_ref=payer_ref,
            payee_agent_id=payee_agent_id,
            escrow_address=addr,
            tier=tier or classify_tier(amount),
            timeout_tick=self._clock.now + (timeout_ticks or self.escrow_timeout),
            workflow_id=workflow_id,
        )
        self.escrows[escrow_id] = rec
        self._by_address[(rail_id, addr)] = rec
        self._audit.append("escrow_provisioned", {"workflow_id": workflow_id, "escrow_id": escrow_id},
                           {"rail_id": rail_id, "escrow_address": addr, "amount": amount.to_record(),
                            "tier": rec.tier.value})
        return addr

    def finality_threshold(self, rec: EscrowRecord | None, rail_id: str) -> int:
        cfg = self.rail(rail_id).config
        if rec is not None and rec.tier is Tier.Tier3:
            return cfg.extended_finality_confirmations
        return cfg.finality_confirmations

    def observe_deposit(self, rail_id: str, escrow_address: str, expected_amount, claimed_tx_id=None) -> dict:
        """Scan the rail's own ledger for a funding transfer; caller tx ids are only cross-checked."""
        chain = self.rail(rail_id)
        need = _units(expected_amount)
        rec = self._by_address.get((rail_id, escrow_address))
        inbound = chain.inbound(escrow_address)
        found = None
        for res in inbound:
            paid = sum(a for to, a in res.tx.outputs if to == escrow_address)
            if res.status == "success" and paid >= need:
                found = res
                break
        confirmations = chain.confirmations(found.tx.tx_id) if found else 0
        final = found is not None and confirmations >= self.finality_threshold(rec, rail_id)
        result = {
            "seen": bool(inbound),
            "confirmations": confirmations,
            "final": final,
            "deposit_tx_id": found.tx.tx_id if found else None,
            "claim_verified": claimed_tx_id is None or (found is not None and found.tx.tx_id == claimed_tx_id),
        }
        if rec is not None and found is not None:
            if rec.status is EscrowStatus.CREATED:
                rec.deposit_tx_id = found.tx.tx_id
                self.transition_escrow(rec.escrow_id, EscrowEvent.DepositObserved)
            if final and rec.status is EscrowStatus.FUNDING_PENDING:
                self.transition_escrow(rec.escrow_id, EscrowEvent.FinalityReached)
        return result

    def transition_escrow(self, escrow_id: str, event, root=None) -> EscrowStatus:
        rec = self.escrow(escrow_id)
        event = EscrowEvent(event) if not isinstance(event, EscrowEvent) else event
        # legality first, then the guards that need outside facts
        next_status(rec.status, event, rec.tier, rec.window_cleared)
        if event is EscrowEvent.PoTEAnchored:
            anchor = self._anchor_lookup(escrow_id)
            if anchor is None or (root is not None and anchor.merkle_root != root):
                raise PoTEMissing(f"no anchored PoTE root for {escrow_id}")
            rec.pote_root = anchor.merkle_root
            if rec.tier is Tier.Tier3:
                rec.challenge_window_end = self._clock.now + self.challenge_window
        elif event is EscrowEvent.SettlementConfirmed:
            if not self._tx_final(rec, self._pending_settle.get(escrow_id)):
                raise WrongState(f"no final settlement transaction for {escrow_id}")
        elif event is EscrowEvent.RefundConfirmed:
            if not self._tx_final(rec, self._pending_refund.get(escrow_id)):
                raise WrongState(f"no final refund transaction for {escrow_id}")
        old = rec.status
        new = rec.apply(event, self._clock.now)
        self._audit.append("escrow_transition", {"workflow_id": rec.workflow_id, "escrow_id": escrow_id},
                           {"from": old.value, "event": event.value, "to": new.value})
        return new

    def _tx_final(self, rec: EscrowRecord, tx_id) -> bool:
        if tx_id is None:
            return False
        chain = self.rails[rec.rail_id]
        res = chain.lookup(tx_id)
        return res is not None and res.status == "success" and \
            chain.confirmations(tx_id) >= chain.config.finality_confirmations

    def settle(self, escrow_id: str) -> str:
        rec = self.escrow(escrow_id)
        if self._anchor_lookup(escrow_id) is None:
            self._audit.append("settle_blocked", {"workflow_id": rec.workflow_id, "escrow_id": escrow_id},
                               {"reason": "PoTEMissing"})
            raise PoTEMissing(f"escrow {escrow_id} has no anchored PoTE root")
        if rec.status is not EscrowStatus.SETTLEMENT_PENDING:
            raise WrongState(f"escrow {escrow_id} is {rec.status}")
        if rec.tier is Tier.Tier3 and not rec.window_cleared:
            raise WrongState(f"challenge window for {escrow_id} still open")
        if escrow_id in self._pending_settle:
            return self._pending_settle[escrow_id]
        payee = self.faults.get(escrow_id) or self.agent_address(rec.payee_agent_id)
        fee = self.rails[rec.rail_id].config.flat_fee
        tx = self.wallets.sign_transfer(self._wallet_ref(escrow_id), payee, rec.amount - fee)
        tx_id = self.rails[rec.rail_id].submit(tx)
        rec.add_settlement_tx(rec.rail_id, tx_id)
        self._pending_settle[escrow_id] = tx_id
        self._audit.append("settlement_submitted", {"workflow_id": rec.workflow_id, "escrow_id": escrow_id},
                           {"rail_id": rec.rail_id, "tx_id": tx_id, "pote_root": rec.pote_root})
        return tx_id

    def refund(self, escrow_id: str, reason: str) -> str:
        rec = self.escrow(escrow_id)
        if rec.status is not EscrowStatus.REFUND_PENDING:
            raise WrongState(f"escrow {escrow_id} is {rec.status}")
        if escrow_id in self._pending_refund:
            return self._pending_refund[escrow_id]
        chain = self.rails[rec.rail_id]
        fee = chain.config.flat_fee.minor_units
        held = chain.balance(rec.escrow_address)
        back = min(held, rec.amount.minor_units) - fee
        if back < 0:
            raise InsufficientEscrowBalance(f"escrow {escrow_id} cannot cover the refund fee")
        tx = self.wallets.sign_transfer(self._wallet_ref(escrow_id), self.wallets.address_of(rec.payer_ref), back)
        tx_id = chain.submit(tx)
        rec.refund_tx_id = tx_id
        rec.refund_reason = reason
        self._pending_refund[escrow_id] = tx_id
        self._audit.append("refund_submitted", {"workflow_id": rec.workflow_id, "escrow_id": escrow_id},
                           {"rail_id": rec.rail_id, "tx_id": tx_id, "reason": reason})
        return tx_id

    def batch_settle(self, charges, rail_id: str, escrow_id: str) -> str:
        """Pay many Tier-1 charges from one batch escrow in a single transaction."""
        norm = []
        for c in charges:
            amount = c["amount"] if isinstance(c["amount"], Amount) else Amount(int(c["amount"]))
            norm.append((c["payee"], amount, c.get("rail_id", rail_id)))
        if any(r != rail_id for _, _, r in norm):
            raise MixedRail("charges span more than one rail")
        if any(classify_tier(a) is not Tier.Tier1 for _, a, _ in norm):
            raise MixedTier("batch settlement only carries Tier 1 charges")
        rec = self.escrow(escrow_id)
        if rec.rail_id != rail_id:
            raise MixedRail(f"batch escrow {escrow_id} lives on {rec.rail_id}")
        if self._anchor_lookup(escrow_id) is None:
            raise PoTEMissing(f"escrow {escrow_id} has no anchored PoTE root")
        if rec.status is not EscrowStatus.SETTLEMENT_PENDING:
            raise WrongState(f"escrow {escrow_id} is {rec.status}")
        if escrow_id in self._pending_settle:
            return self._pending_settle[escrow_id]
        per_payee: dict = {}
        for payee, amount, _ in norm:
            per_payee[payee] = per_payee.get(payee, 0) + amount.minor_units
        chain = self.rails[rail_id]
        total = sum(per_payee.values())
        if chain.balance(rec.escrow_address) < total + chain.config.flat_fee.minor_units:
            raise InsufficientEscrowBalance(f"batch escrow {escrow_id} holds too little")
        outputs = [(self.faults.get(escrow_id) or self.agent_address(p), units) for p, units in per_payee.items()]
        tx = self.wallets.sign_transfer(self._wallet_ref(escrow_id), None, outputs=outputs)
        tx_id = chain.submit(tx)
        rec.add_settlement_tx(rail_id, tx_id)
        rec.batch_charges = [[p, units] for p, units in per_payee.items()]
        self._pending_settle[escrow_id] = tx_id
        self._audit.append("batch_settlement_submitted", {"workflow_id": rec.workflow_id, "escrow_id": escrow_id},
                           {"rail_id": rail_id, "tx_id": tx_id, "charges": len(norm), "total": total})
        return tx_id

    def attach_settlement_tx(self, escrow_id: str, rail_id: str, tx_id: str) -> None:
        """Record an externally reported settlement tx; it must exist on the escrow's own rail."""
        rec = self.escrow(escrow_id)
        if rail_id != rec.rail_id or self.rail(rec.rail_id).lookup(tx_id) is None:
            self._audit.append("tx_scope_rejected", {"escrow_id": escrow_id},
                               {"rail_id": rail_id, "tx_id": tx_id})
            raise RailScopeViolation(f"{tx_id} is not a {rec.rail_id} transaction")
        rec.add_settlement_tx(rail_id, tx_id)

    # -- reconciliation / explorer -----------------------------------------
    def reconcile(self, escrow_id: str) -> Reconciliation:
        rec = self.escrow(escrow_id)
        if rec.status is not EscrowStatus.SETTLED:
            raise WrongState(f"escrow {escrow_id} is {rec.status}")
        if not rec.settlement_tx_ids:
            raise TxNotFound(escrow_id)
        rail_id, tx_id = rec.settlement_tx_ids[-1]
        chain = self.rail(rail_id)
        view = chain.explorer_tx(tx_id)
        fee = chain.config.flat_fee
        bad = []
        if view["from"] != rec.escrow_address:
            bad.append("from")
        if rec.batch_charges is not None:
            want = [{"to": self.agent_address(p), "amount": u} for p, u in rec.batch_charges]
            got = view.get("outputs") or [{"to": view["to"], "amount": view["amount"]}]
            if [o["to"] for o in got] != [o["to"] for o in want]:
                bad.append("to")
            if [o["amount"] for o in got] != [o["amount"] for o in want]:
                bad.append("amount")
        else:
            if view["to"] != self.agent_address(rec.payee_agent_id):
                bad.append("to")
            if view["amount"] != (rec.amount - fee).minor_units:
                bad.append("amount")
        verdict = Reconciliation(not bad, tuple(bad))
        self._index(view, rec, "settlement", verdict)
        self._audit.append("reconciled", {"workflow_id": rec.workflow_id, "escrow_id": escrow_id},
                           {"tx_id": tx_id, **verdict.to_record()})
        return verdict

    def _index(self, view: dict, rec: EscrowRecord, kind: str, verdict: Reconciliation | None = None) -> None:
        entry = dict(view)
        entry.update({"escrow_id": rec.escrow_id, "workflow_id": rec.workflow_id, "kind": kind})
        if verdict is not None:
            entry["reconcile"] = verdict.to_record()
        self.explorer = [e for e in self.explorer if e["tx_id"] != entry["tx_id"]]
        self.explorer.append(entry)

    # -- time ---------------------------------------------------------------
    def tick_rail(self, rail_id: str, n: int = 1) -> int:
        chain = self.rail(rail_id)
        for _ in range(n):
            chain.produce_block(self._clock.now, self._clock.stamp())
            self.poll()
        return chain.height

    def produce_all(self) -> None:
        """One block on every rail at the current tick, then react."""
        for rail_id in sorted(self.rails):
            self.rails[rail_id].produce_block(self._clock.now, self._clock.stamp())
        self.poll()

    def poll(self) -> None:
        now = self._clock.now
        for rec in list(self.escrows.values()):
            if rec.terminal:
                continue
            if rec.status in (EscrowStatus.CREATED, EscrowStatus.FUNDING_PENDING):
                self.observe_deposit(rec.rail_id, rec.escrow_address, rec.amount)
            if now >= rec.timeout_tick and rec.status in (
                    EscrowStatus.CREATED, EscrowStatus.FUNDING_PENDING, EscrowStatus.OPEN):
                self.transition_escrow(rec.escrow_id, EscrowEvent.Timeout)
            if (rec.status is EscrowStatus.SETTLEMENT_PENDING and rec.tier is Tier.Tier3
                    and not rec.window_cleared and now >= rec.challenge_window_end):
                self.transition_escrow(rec.escrow_id, EscrowEvent.ChallengeWindowElapsed)
            if rec.status is EscrowStatus.SETTLEMENT_PENDING and \
                    self._tx_final(rec, self._pending_settle.get(rec.escrow_id)):
                self.transition_escrow(rec.escrow_id, EscrowEvent.SettlementConfirmed)
            if rec.status is EscrowStatus.REFUND_PENDING and \
                    self._tx_final(rec, self._pending_refund.get(rec.escrow_id)):
                self.transition_escrow(rec.escrow_id, EscrowEvent.RefundConfirmed)
                self._index(self.rails[rec.rail_id].explorer_tx(rec.refund_tx_id), rec, "refund")

    # -- state views --------------------------------------------------------
    def control_state(self) -> dict:
        return {
            "escrows": {k: v.to_record() for k, v in self.escrows.items()},
            "explorer": list(self.explorer),
            "wallets": self.wallets.snapshot(),
            "rails": {k: c.config.to_record() for k, c in self.rails.items()},
        }

    def balances(self) -> dict:
        return {rid: dict(sorted(c.accounts.items())) for rid, c in sorted(self.rails.items())}
