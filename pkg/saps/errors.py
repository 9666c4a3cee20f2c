"""Exception hierarchy shared by every SAPS module."""
from typing import Optional


class SapsError(Exception):
    """Root of all errors raised by this package."""


class InvalidInput(SapsError, ValueError):
    """A value violates a documented precondition."""


class ConfigurationError(SapsError):
    """The run configuration cannot be executed (e.g. a zero-bandwidth link)."""


class DomainError(SapsError, ValueError):
    """A theory formula was evaluated outside its domain."""


class NumericalError(SapsError):
    def __init__(self, message: str, round: Optional[int] = None, rank: Optional[int] = None):
        self.round = round
        self.rank = rank
        where = []
        if round is not None:
            where.append(f"round={round}")
        if rank is not None:
            where.append(f"rank={rank}")
        super().__init__(f"{message} ({', '.join(where)})" if where else message)


class TransportError(SapsError):
    """Connection loss, refused connection or timeout."""


# ---- Protocol errors ----
class ProtocolError(SapsError):
    def __init__(self, message: str, worker: Optional[int] = None):
        self.worker = worker
        super().__init__(f"worker {worker}: {message}" if worker is not None else message)


class BadMagic(ProtocolError):
    pass


class BadVersion(ProtocolError):
    pass


class TruncatedFrame(ProtocolError):
    pass


class ChecksumMismatch(ProtocolError):
    pass


class UnexpectedMessage(ProtocolError):
    pass


class CountMismatch(ProtocolError):
    """Payload length disagrees with the locally generated mask (seed desync)."""


class RoundMismatch(ProtocolError):
    pass


class DuplicateAcknowledgment(ProtocolError):
    pass
