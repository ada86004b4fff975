"""Exception types shared across the package."""


class EvtcError(Exception):
    """Base class for all package errors."""


class DimensionError(EvtcError):
    """Operand shapes are incompatible with the requested operation."""


class ContractError(EvtcError):
    """A documented precondition was violated."""


class ConfigError(EvtcError):
    """Invalid model or experiment configuration."""


class DataError(EvtcError):
    """Malformed input data (e.g. out-of-range class ids)."""


class FormatError(EvtcError):
    """Corrupt or unsupported checkpoint / CSV container."""

    def __init__(self, message, offset=None):
        if offset is not None:
            message = f"{message} (at byte offset {offset})"
        super().__init__(message)
        self.offset = offset


class NumericalError(EvtcError):
    """Non-finite value encountered where finiteness is required."""
