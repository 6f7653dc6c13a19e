"""Exception hierarchy shared by every xlab module."""


class XlabError(Exception):
    """Base class for all lab errors."""


class NumericInputError(XlabError, ValueError):
    """Non-finite values were passed to a numerical routine."""


class ShapeError(XlabError, ValueError):
    """Array shapes or dimensions do not line up."""


class ConfigError(XlabError, ValueError):
    """A configuration value is invalid or inconsistent."""


class DataError(XlabError, ValueError):
    """A dataset is empty or otherwise unusable."""


class ParseError(XlabError, ValueError):
    """A file could not be parsed. ``line`` is 1-based when known."""

    def __init__(self, message, line=None):
        self.line = line
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)


class ValidationError(XlabError, ValueError):
    """Parsed content violates a domain invariant (e.g. label out of range)."""


class StateError(XlabError, RuntimeError):
    """An operation was called in the wrong lifecycle state."""


class DegenerateInputError(XlabError, ValueError):
    """Input has no usable spread (e.g. rank zero for PCA)."""


class UndefinedMetricError(XlabError, ValueError):
    """A metric is mathematically undefined for the given input."""


class BudgetExhausted(XlabError):
    """The victim's query budget cannot cover the requested batch."""

    def __init__(self, remaining, requested):
        self.remaining = remaining
        self.requested = requested
        super().__init__(f"budget exhausted: requested {requested}, remaining {remaining}")


class TransportError(XlabError, ConnectionError):
    """The remote victim service could not be reached or answered garbage."""
