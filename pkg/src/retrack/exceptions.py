"""Exception types shared across the package."""


class RetrackError(Exception):
    """Base class for all package-specific errors."""


class ValidationError(RetrackError, ValueError):
    """An argument failed a structural or range check."""


class ResolutionMismatchError(ValidationError):
    """Two grids that must share a resolution do not."""


class SequenceMismatchError(ValidationError):
    """Paired sequences differ in length or frame indexing."""


class NoProposalsError(RetrackError):
    """An operation that needs at least one proposal received none."""


class LabelParseError(RetrackError, ValueError):
    """A label or proposal file is malformed.

    Carries enough context (path, line number) to locate the offending line.
    """

    def __init__(self, message: str, path: str | None = None, line: int | None = None):
        self.path = path
        self.line = line
        prefix = ""
        if path is not None:
            prefix = f"{path}:" if line is None else f"{path}:{line}: "
        super().__init__(prefix + message)


class ConfigError(RetrackError, ValueError):
    """A configuration file contains unknown keys or invalid values."""


class NumericalError(RetrackError, ArithmeticError):
    """A computation produced NaN or failed to remain finite."""
