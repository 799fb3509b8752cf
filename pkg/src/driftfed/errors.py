"""Exception types shared across the simulator."""


class DriftFedError(Exception):
    """Base class for all library errors."""


class ConfigError(DriftFedError):
    """Invalid configuration: bad dimensions, weights, file references, ..."""


class LibsvmParseError(DriftFedError):
    """Malformed LIBSVM input. Carries the 1-based line number."""

    def __init__(self, line_no, message):
        self.line_no = line_no
        super().__init__(f"line {line_no}: {message}")


class NumericalError(DriftFedError):
    """A numeric routine produced a non-finite or otherwise unusable result."""


class CoverageError(DriftFedError):
    """Internal invariant violation: a round has no covering instance."""
