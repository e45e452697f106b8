"""In-memory chain standing in for an external settlement rail."""

from __future__ import annotations

from dataclasses import dataclass, field

from ..core import Amount, canonical_serialize, commit, hash256, parse_rail_id, verify
from ..errors import ConservationViolation, TxNotFound


@dataclass(frozen=True)
class RailConfig:
    rail_id: str
    chain_id: int
    finality_confirmations: int = 3
    extended_finality_confirmations: int = 12
    flat_fee: Amount = Amount(5)

    def __post_init__(self):
        parse_rail_id(self.rail_id)
        if self.finality_confirmations < 1:
            raise ValueError("finality_confirmations must be positive")
        if self.extended_finality_confirmations < self.finality_confirmations:
            raise ValueError("extended finality must be at least standard finality")

    def to_record(self) -> dict:
        return {
            "rail_id": self.rail_id,
            "chain_id": self.chain_id,
            "finality_confirmations": self.finality_confirmations,
            "extended_finality_confirmations": self.extended_finality_confirmations,
            "flat_fee": self.flat_fee.to_record(),
        }

    @classmethod
    def from_record(cls, rec: dict) -> "RailConfig":
        return cls(
            rail_id=rec["rail_id"],
            chain_id=rec["chain_id"],
            finality_confirmations=rec.get("finality_confirmations", 3),
            extended_finality_confirmations=rec.get("extended_finality_confirmations", 12),
            flat_fee=Amount.from_record(rec.get("flat_fee", 5)),
        )


DEFAULT_RAILS = (
    RailConfig("sim:alpha", 101),
    RailConfig("sim:beta", 102),
)


def address_of(public_key: bytes) -> str:
    return "0x" + hash256(public_key).hex()[:40]


@dataclass(frozen=True)
class SignedTx:
    chain_id: int
    sender: str
    sender_pk: bytes
    nonce: int
    outputs: tuple  # of (to_address, minor units)
    fee: int
    revert: bool
    signature: bytes

    def body(self) -> dict:
        return tx_body(self.chain_id, self.sender, self.sender_pk, self.nonce, self.outputs, self.fee, self.revert)

    @property
    def tx_id(self) -> str:
        return commit({"body": self.body(), "signature": self.signature.hex()}).hex()

    @property
    def value(self) -> int:
        return sum(amount for _, amount in self.outputs)


def tx_body(chain_id, sender, sender_pk, nonce, outputs, fee, revert) -> dict:
    return {
        "chain_id": chain_id,
        "from": sender,
        "sender_pk": sender_pk.hex(),
        "nonce": nonce,
        "outputs": [[to, amount] for to, amount in outputs],
        "fee": fee,
        "revert": revert,
    }


@dataclass(frozen=True)
class TxResult:
    tx: SignedTx
    status: str  # "success" | "reverted"
    block_height: int


@dataclass
class Block:
    height: int
    tick: int
    seq: int
    prev_hash: str
    results: list = field(default_factory=list)

    @property
    def block_hash(self) -> str:
        return commit({
            "height": self.height,
            "tick": self.tick,
            "prev_hash": self.prev_hash,
            "txs": [[r.tx.tx_id, r.status] for r in self.results],
        }).hex()


class SimChain:
    """Blocks, balances and nonces for one rail. Supply is minted only by ``allocate``."""

    def __init__(self, config: RailConfig):
        self.config = config
        self.blocks: list = []
        self.accounts: dict = {}
        self.nonces: dict = {}
        self.pending: list = []
        self.rejected: list = []  # (tx_id, reason, height at rejection)
        self.supply = 0
        self.allocations: list = []  # (height at mint, address, units)
        self.fees_collected = 0
        self._index: dict = {}
        self.conservation_checks = 0

    @property
    def rail_id(self) -> str:
        return self.config.rail_id

    @property
    def height(self) -> int:
        return len(self.blocks)

    def allocate(self, address: str, units: int) -> None:
        if units < 0:
            raise ValueError("allocation must be non-negative")
        self.accounts[address] = self.accounts.get(address, 0) + units
        self.supply += units
        self.allocations.append((self.height, address, units))

    def balance(self, address: str) -> int:
        return self.accounts.get(address, 0)

    def nonce_of(self, address: str) -> int:
        return self.nonces.get(address, 0)

    def submit(self, tx: SignedTx) -> str:
        self.pending.append(tx)
        return tx.tx_id

    def _validate(self, tx: SignedTx):
        """Return (verdict, reason): verdict in include/reject/wait."""
        if tx.chain_id != self.config.chain_id:
            return "reject", "chain_id_mismatch"
        if not verify(tx.sender_pk, canonical_serialize(tx.body()), tx.signature):
            return "reject", "bad_signature"
        if address_of(tx.sender_pk) != tx.sender:
            return "reject", "sender_key_mismatch"
        expected = self.nonce_of(tx.sender)
        if tx.nonce < expected:
            return "reject", "stale_nonce"
        if tx.nonce > expected:
            return "wait", "nonce_gap"
        if tx.fee != self.config.flat_fee.minor_units:
            return "reject", "wrong_fee"
        if any(amount < 0 for _, amount in tx.outputs):
            return "reject", "negative_output"
        need = tx.fee if tx.revert else tx.fee + tx.value
        if self.balance(tx.sender) < need:
            return "reject", "insufficient_balance"
        return "include", None

    def produce_block(self, tick: int, seq: int) -> Block:
        prev = self.blocks[-1].block_hash if self.blocks else "0" * 64
        block = Block(height=self.height + 1, tick=tick, seq=seq, prev_hash=prev)
        still_pending = []
        for tx in self.pending:
            verdict, reason = self._validate(tx)
            if verdict == "wait":
                still_pending.append(tx)
                continue
            if verdict == "reject":
                self.rejected.append((tx.tx_id, reason, block.height))
                continue
            self.accounts[tx.sender] = self.balance(tx.sender) - tx.fee
            self.fees_collected += tx.fee
            self.nonces[tx.sender] = tx.nonce + 1
            if tx.revert:
                status = "reverted"
            else:
                status = "success"
                self.accounts[tx.sender] -= tx.value
                for to, amount in tx.outputs:
                    self.accounts[to] = self.balance(to) + amount
            result = TxResult(tx, status, block.height)
            block.results.append(result)
            self._index[tx.tx_id] = result
        self.pending = still_pending
        self.blocks.append(block)
        self.check_conservation()
        return block

    def check_conservation(self) -> None:
        self.conservation_checks += 1
        if sum(self.accounts.values()) + self.fees_collected != self.supply:
            raise ConservationViolation(f"{self.rail_id} at height {self.height}")

    def lookup(self, tx_id: str) -> TxResult | None:
        return self._index.get(tx_id)

    def confirmations(self, tx_id: str) -> int:
        res = self._index.get(tx_id)
        return 0 if res is None else self.height - res.block_height + 1

    def rejection(self, tx_id: str):
        for tid, reason, height in self.rejected:
            if tid == tx_id:
                return reason
        return None

    def inbound(self, address: str) -> list:
        out = []
        for block in self.blocks:
            for r in block.results:
                if any(to == address for to, _ in r.tx.outputs):
                    out.append(r)
        return out

    def explorer_tx(self, tx_id: str) -> dict:
        """Explorer view of one included transaction."""
        res = self._index.get(tx_id)
        if res is None:
            raise TxNotFound(tx_id)
        tx = res.tx
        rec = {
            "rail_id": self.rail_id,
            "tx_id": tx_id,
            "from": tx.sender,
            "to": tx.outputs[0][0] if len(tx.outputs) == 1 else None,
            "amount": tx.value,
            "fee": tx.fee,
            "status": res.status,
            "confirmations": self.confirmations(tx_id),
            "block_height": res.block_height,
        }
        if len(tx.outputs) != 1:
            rec["outputs"] = [{"to": to, "amount": amount} for to, amount in tx.outputs]
        return rec
