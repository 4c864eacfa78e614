"""Exception hierarchy shared by every module of the package."""


class CollabInferError(Exception):
    """Base class for all package errors."""


# fixed point
class RangeOverflow(CollabInferError, ValueError):
    pass


# sharing
class InvalidPartyCount(CollabInferError, ValueError):
    pass


class MissingShare(CollabInferError):
    pass


class ShapeMismatch(CollabInferError, ValueError):
    pass


class TripleShapeMismatch(ShapeMismatch):
    pass


class InsufficientRandomness(CollabInferError):
    pass


# transport
class PartyAbort(CollabInferError):
    """A party stopped participating; the protocol halts without output."""

    def __init__(self, party: int, message: str = ""):
        self.party = party
        super().__init__(message or f"party {party} aborted")


class TransportFailure(CollabInferError):
    pass


class UnknownPreset(CollabInferError, KeyError):
    pass


# nn
class UnknownArchitecture(CollabInferError, KeyError):
    pass


class NonFiniteLoss(CollabInferError, FloatingPointError):
    pass


class ApproximationDomainError(CollabInferError, ValueError):
    pass


# ensemble / incentive
class WeightSumViolation(CollabInferError, ValueError):
    pass


class InvalidDistribution(CollabInferError, ValueError):
    pass


class NotImageShaped(CollabInferError, ValueError):
    pass


class AllZeroAccuracy(CollabInferError, ValueError):
    pass


class DimensionMismatch(CollabInferError, ValueError):
    pass


# partition
class PartitionInfeasible(CollabInferError):
    pass


# escrow
class EscrowReject(CollabInferError):
    """Any reject branch of the escrow state machine."""


class DuplicateJob(EscrowReject):
    pass


class ZeroDeposit(EscrowReject):
    pass


class InsufficientBalance(EscrowReject):
    pass


class UnknownJob(EscrowReject):
    pass


class AlreadyCompleted(EscrowReject):
    pass


class NotClient(EscrowReject):
    pass


class BadSignature(EscrowReject):
    def __init__(self, party_index: int):
        self.party_index = party_index
        super().__init__(f"signature of party index {party_index} failed verification")


class UnregisteredKey(EscrowReject):
    pass


# warnings for degenerate inputs that fall back to uniform weights
class DegenerateCovariance(UserWarning):
    pass


class NoAgreementAnywhere(UserWarning):
    pass
