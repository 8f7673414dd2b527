"""Exception types raised across the package."""


class ViewplanError(Exception):
    """Base class for all package errors."""


class OracleFailure(ViewplanError):
    """The reconstruction oracle could not triangulate a single point.

    ``value`` carries the all-zero objective value callers record for the
    degenerate view set.
    """

    def __init__(self, message, value=None):
        super().__init__(message)
        self.value = value


class SingularKernel(ViewplanError):
    """Kernel matrix stayed non-positive-definite after the jitter ladder."""


class EmptyCandidates(ViewplanError):
    """The finite candidate pool has no remaining poses."""


class EmptyCloud(ViewplanError):
    """An operation that needs points received an empty cloud."""


class DimensionMismatch(ViewplanError):
    """Two images that must share a shape do not."""


class ConfigInvalid(ViewplanError):
    """An experiment config violates a named constraint."""


class IoFailure(ViewplanError):
    """Reading or writing an artifact failed."""


class ParseError(IoFailure):
    """Malformed input file; ``line`` is 1-based when known."""

    def __init__(self, message, line=None):
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)
        self.line = line


class SchemaError(IoFailure):
    """A file parsed but lacks required properties."""

    def __init__(self, missing):
        self.missing = list(missing)
        super().__init__("missing properties: " + ", ".join(self.missing))
