"""Exception hierarchy shared by every service in the kernel."""


class TessPayError(Exception):
    """Base class for all kernel errors."""


# canonical encoding / crypto
class NonCanonicalValue(TessPayError):
    pass


class EmptyLeafSet(TessPayError):
    pass


class AmountOverflow(TessPayError):
    pass


class CurrencyMismatch(TessPayError):
    pass


# identity / authorization
class NotFound(TessPayError):
    pass


class DuplicateAgentId(TessPayError):
    pass


class DuplicateDomainName(TessPayError):
    pass


class UnknownAgent(TessPayError):
    pass


class ManifestTampered(TessPayError):
    pass


class ScopeMandateMismatch(TessPayError):
    pass


class InvalidDelegationChain(TessPayError):
    pass


class TokenRejected(TessPayError):
    """Base for every reason an A-JWT presentation is refused."""


class Expired(TokenRejected):
    pass


class NotYetValid(TokenRejected):
    pass


class BadIssuerSig(TokenRejected):
    pass


class BadPoP(TokenRejected):
    pass


class Replayed(TokenRejected):
    pass


class ChecksumDrift(TokenRejected):
    pass


# orchestration
class WindowExpired(TessPayError):
    pass


class BudgetExceeded(TessPayError):
    pass


class UnknownMerchant(TessPayError):
    pass


class CartRejected(TessPayError):
    pass


class NoAgentFound(TessPayError):
    pass


class EscrowNotOpen(TessPayError):
    pass


class BadToken(TessPayError):
    pass


class NoTelemetry(TessPayError):
    pass


class UnknownWorkflow(TessPayError):
    pass


# verification / audit
class NoNotary(TessPayError):
    pass


class WrongState(TessPayError):
    pass


class MissingProofObject(TessPayError):
    pass


class NonCanonicalOrder(TessPayError):
    pass


class NoQuorum(TessPayError):
    """Raised by PoTE assembly; ``quorum_validate`` returns an instance instead."""

    def __init__(self, subject, matching_votes, required):
        super().__init__(f"{matching_votes} matching votes, {required} required")
        self.subject = subject
        self.matching_votes = matching_votes
        self.required = required


class ContractFailed(TessPayError):
    def __init__(self, reasons):
        super().__init__("; ".join(reasons))
        self.reasons = list(reasons)


class Conflict(TessPayError):
    pass


# settlement
class ZeroAmount(TessPayError):
    pass


class UnknownRail(TessPayError):
    pass


class DuplicateEscrow(TessPayError):
    pass


class UnknownWallet(TessPayError):
    pass


class UnknownEscrow(TessPayError):
    pass


class IllegalTransition(TessPayError):
    def __init__(self, status, event):
        super().__init__(f"{event} not allowed in {status}")
        self.status = status
        self.event = event


class PoTEMissing(TessPayError):
    pass


class MixedTier(TessPayError):
    pass


class MixedRail(TessPayError):
    pass


class TxNotFound(TessPayError):
    pass


class InsufficientEscrowBalance(TessPayError):
    pass


class RailScopeViolation(TessPayError):
    pass


class ConservationViolation(TessPayError):
    pass


# gateway
class ConfigInvalid(TessPayError):
    pass
