"""Exception hierarchy shared by all medmap modules."""


class MedmapError(Exception):
    """Base class for every error raised by this package."""


class ValidationError(MedmapError, ValueError):
    """An input value violates a documented precondition or invariant."""


class ConfigurationError(MedmapError, ValueError):
    """A run/anchor/regime configuration is internally inconsistent."""


class FormatError(MedmapError, ValueError):
    """A serialized artifact is malformed.

    Carries the byte offset at which the problem was detected.
    """

    def __init__(self, message: str, offset: int):
        super().__init__(f"{message} (byte offset {offset})")
        self.offset = offset


class NumericError(MedmapError, RuntimeError):
    """A computation produced non-finite or otherwise unusable numbers."""


class ReportError(MedmapError, RuntimeError):
    """Report rendering was asked to do something contradictory."""
