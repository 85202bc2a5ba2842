"""Exception hierarchy shared by every module."""


class LRTError(Exception):
    """Base class for all engine errors."""


class DomainError(LRTError, ValueError):
    """An input lies outside the mathematical domain of an operation."""


class ContractError(LRTError, ValueError):
    """Shapes, arity or calling conventions do not match an operation's contract."""


class ConfigError(LRTError, ValueError):
    """A configuration value is invalid or inconsistent."""


class ProtocolError(LRTError):
    """The incremental-session protocol was violated (e.g. overlapping classes)."""


class FreezeViolation(LRTError):
    """A tensor that must stay frozen received a gradient or changed value."""


class ParseError(LRTError):
    """A container file is malformed.  ``offset`` is the byte position of the failure."""

    def __init__(self, message, offset):
        super().__init__(f"{message} (at byte offset {offset})")
        self.offset = offset


class VersionError(ParseError):
    """A container file carries an unsupported format version."""
