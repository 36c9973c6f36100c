"""Exception hierarchy shared by every ilq module."""


class IlqError(Exception):
    """Base class for all toolkit errors."""


class ShapeError(IlqError, ValueError):
    pass


class DomainError(IlqError, ValueError):
    pass


class ContractError(IlqError, RuntimeError):
    """A caller violated an operation's precondition."""


class NonFiniteError(IlqError, FloatingPointError):
    """Training produced a NaN/inf loss or gradient."""


class ConfigError(IlqError, ValueError):
    pass


class CheckpointError(IlqError):
    pass


class BadMagicError(CheckpointError):
    pass


class TruncatedCheckpointError(CheckpointError):
    pass


class VersionMismatchError(CheckpointError):
    pass


class PackError(IlqError, ValueError):
    pass
