"""Wallet custody. Secret keys live only here and never leave via any serializer."""

from __future__ import annotations

from dataclasses import dataclass, field

from ..core import Amount, KeyPair, canonical_serialize, keygen, sign
from ..errors import UnknownWallet
from .chain import RailConfig, SignedTx, address_of, tx_body


@dataclass
class _Account:
    rail: RailConfig
    address: str
    keypair: KeyPair = field(repr=False)
    next_nonce: int = 0


class WalletStore:
    """Maps wallet_ref -> (rail, address, keys). Each wallet is bound to one rail."""

    def __init__(self, rng):
        self._rng = rng
        self._accounts: dict = {}

    def __repr__(self):
        return f"WalletStore({len(self._accounts)} wallets)"

    def __contains__(self, wallet_ref):
        return wallet_ref in self._accounts

    def create(self, wallet_ref: str, rail: RailConfig, keypair: KeyPair | None = None) -> str:
        if wallet_ref in self._accounts:
            raise ValueError(f"wallet {wallet_ref!r} exists")
        kp = keypair or keygen(self._rng)
        addr = address_of(kp.public_key)
        self._accounts[wallet_ref] = _Account(rail, addr, kp)
        return addr

    def _get(self, wallet_ref: str) -> _Account:
        try:
            return self._accounts[wallet_ref]
        except KeyError:
            raise UnknownWallet(wallet_ref) from None

    def address_of(self, wallet_ref: str) -> str:
        return self._get(wallet_ref).address

    def rail_of(self, wallet_ref: str) -> str:
        return self._get(wallet_ref).rail.rail_id

    def public_key(self, wallet_ref: str) -> bytes:
        return self._get(wallet_ref).keypair.public_key

    def sign_transfer(self, wallet_ref: str, to_address, amount=None, revert_flag: bool = False,
                      outputs=None) -> SignedTx:
        """Sign a transfer on the wallet's own rail; chain_id comes from that binding.

        Pass either ``to_address``/``amount`` or a list of ``outputs`` (batch payout).
        """
        acct = self._get(wallet_ref)
        if outputs is None:
            units = amount.minor_units if isinstance(amount, Amount) else int(amount)
            outputs = ((to_address, units),)
        else:
            outputs = tuple((to, a.minor_units if isinstance(a, Amount) else int(a)) for to, a in outputs)
        nonce = acct.next_nonce
        fee = acct.rail.flat_fee.minor_units
        body = tx_body(acct.rail.chain_id, acct.address, acct.keypair.public_key, nonce, outputs, fee, revert_flag)
        sig = sign(acct.keypair.secret_key, canonical_serialize(body))
        acct.next_nonce += 1
        return SignedTx(acct.rail.chain_id, acct.address, acct.keypair.public_key, nonce, outputs, fee,
                        revert_flag, sig)

    def snapshot(self) -> dict:
        """Public view only: rail binding and address per wallet."""
        return {ref: {"rail_id": a.rail.rail_id, "address": a.address} for ref, a in sorted(self._accounts.items())}

    def secret_keys(self) -> list:
        # test harness hook for key-isolation scans; never serialized
        return [a.keypair.secret_key for a in self._accounts.values()]
