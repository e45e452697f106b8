from .chain import DEFAULT_RAILS, Block, RailConfig, SignedTx, SimChain, address_of
from .escrow import TERMINAL, TRANSITIONS, EscrowEvent, EscrowRecord, EscrowStatus, next_status
from .service import Reconciliation, SettlementService
from .wallet import WalletStore

__all__ = [
    "DEFAULT_RAILS", "Block", "RailConfig", "SignedTx", "SimChain", "address_of",
    "TERMINAL", "TRANSITIONS", "EscrowEvent", "EscrowRecord", "EscrowStatus", "next_status",
    "Reconciliation", "SettlementService", "WalletStore",
]
