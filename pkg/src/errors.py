"""
Exception hierarchy shared by every ICSWatch module.

Each exception carries the process exit code the CLI reports for it.
"""


class IcsWatchError(Exception):
    """Base class for all ICSWatch errors."""

    exit_code = 1


class InputNotFoundError(IcsWatchError):
    """A referenced input file does not exist."""

    exit_code = 3


class KeyMaterialError(IcsWatchError):
    """Pseudonymization key missing or of the wrong size."""

    exit_code = 4


class RegistryError(IcsWatchError):
    """Bad registry file or unknown protocol name."""

    exit_code = 5


class DatagramError(IcsWatchError):
    """An sFlow datagram cannot be decoded at all."""

    exit_code = 5


class PcapFormatError(IcsWatchError):
    """Unreadable pcap magic number or unsupported link type."""

    exit_code = 5


class SchemaError(IcsWatchError):
    """A record in a structured input file violates its schema."""

    exit_code = 5

    def __init__(self, message, line=None):
        self.line = line
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)


class DomainError(IcsWatchError):
    """An operation was called outside its precondition."""

    exit_code = 6


class ModelValidityError(DomainError):
    """The sampling model violates the n*10 <= N assumption."""


class InconsistentLabelError(IcsWatchError):
    """A packet received two contradictory classification labels."""

    exit_code = 7


class ValidationFailure(IcsWatchError):
    """The end-to-end synthetic validation did not pass."""

    exit_code = 8
