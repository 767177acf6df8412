"""Exception types shared across the package."""


class CtxducerError(Exception):
    """Base class for all package-specific errors."""


class ShapeError(CtxducerError, ValueError):
    """Operands have incompatible or invalid shapes."""


class NotFiniteError(CtxducerError, FloatingPointError):
    """A NaN or Inf appeared where only finite values are allowed."""


class InsufficientDataError(CtxducerError, ValueError):
    """Not enough samples for the requested operation (e.g. N < K)."""


class UndefinedMetricError(CtxducerError, ValueError):
    """A metric is undefined for the given inputs (zero entropy, empty reference, ...)."""


class DegenerateTestError(CtxducerError, ValueError):
    """A significance test cannot be computed (n < 2 or zero variance)."""


class FormatError(CtxducerError, ValueError):
    """A file has a bad magic number, version, or is truncated/corrupt."""


class ConfigError(CtxducerError, ValueError):
    """A configuration document is malformed or contains unknown keys."""


class TokenRangeError(CtxducerError, IndexError):
    """A token or label id is outside the valid range."""


class ContextCacheMissError(CtxducerError, KeyError):
    """A requested neighbour context is not present in the cache."""


class InstanceTooLargeError(CtxducerError, ValueError):
    """Brute-force enumeration was requested for an instance beyond its size guard."""


class TrainingDivergedError(CtxducerError, RuntimeError):
    """Training produced a non-finite loss; a state dump was written if possible."""
