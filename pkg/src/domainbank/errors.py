class DomainBankError(Exception):
    """Base class for errors raised by this package."""


class DimensionError(DomainBankError, ValueError):
    """Tensor shapes do not fit the operation."""


class ContractError(DomainBankError):
    """A documented precondition was violated by the caller."""


class ConfigError(DomainBankError, ValueError):
    """Invalid configuration or run setup."""


class FormatError(DomainBankError, ValueError):
    """A file on disk does not follow the expected layout."""


class ChecksumError(FormatError):
    pass


class VersionError(FormatError):
    pass


class ArchitectureMismatch(FormatError):
    pass


class DivergenceError(DomainBankError, FloatingPointError):
    """A loss became non-finite during training."""

    def __init__(self, message: str, step: int | None = None, report: dict | None = None):
        super().__init__(message)
        self.step = step
        self.report = report or {}
