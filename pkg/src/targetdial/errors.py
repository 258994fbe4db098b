"""Exception taxonomy shared by every module.

Each public operation raises one of these categories so callers (and the
CLI exit-code mapping) can tell configuration mistakes apart from data
problems and internal contract violations.
"""


class TargetDialError(Exception):
    """Base class for all errors raised by this package."""

    category = "error"


class ConfigurationError(TargetDialError):
    """A config object or config file is self-inconsistent or out of range."""

    category = "configuration"


class ValidationError(TargetDialError):
    """Data is well-formed but violates a declared invariant (vocab, shape, ...)."""

    category = "validation"


class ParseError(TargetDialError):
    """A file could not be decoded. Carries the 1-based line number."""

    category = "parse"

    def __init__(self, message, line=None):
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)
        self.line = line


class DimensionError(TargetDialError):
    """Array shapes are incompatible for the requested operation."""

    category = "dimension"


class NumericError(TargetDialError):
    """A computation produced NaN/Inf or diverged."""

    category = "numeric"


class ContractError(TargetDialError):
    """A caller violated a documented precondition."""

    category = "contract"


class StateError(TargetDialError):
    """An operation was attempted in a state that forbids it."""

    category = "state"


class UndefinedMetricError(TargetDialError):
    """The requested metric is undefined on the given inputs."""

    category = "metric"
