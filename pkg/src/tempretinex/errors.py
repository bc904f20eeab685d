"""Exception hierarchy shared across the package.

Everything raised on purpose derives from :class:`TempRetinexError` so
callers (and the CLI) can tell our failures from genuine bugs.
"""


class TempRetinexError(Exception):
    """Base class for all errors raised by this package."""


class NoFramesError(TempRetinexError):
    """A directory or glob matched no loadable frames."""


class ShapeMismatchError(TempRetinexError):
    """Two arrays or sequences that must agree in shape or length do not."""


class ShapeError(TempRetinexError):
    """A single array or tensor has the wrong rank, size, or channel count."""


class DomainError(TempRetinexError):
    """A value falls outside the mathematical domain of an operation."""


class ConfigError(TempRetinexError):
    """A config file or option set cannot be parsed or validated."""


class IoError(TempRetinexError):
    """A file could not be read, decoded, or written."""


class CheckpointError(TempRetinexError):
    """A checkpoint file is missing, malformed, or incompatible."""


class EstimatorUnavailableError(TempRetinexError):
    """The requested optical-flow backend cannot be constructed or run."""


class NumericalError(TempRetinexError):
    """A non-finite value appeared where the math guarantees finite ones."""


class DivergenceError(TempRetinexError):
    """Training loss exceeded the divergence threshold or went non-finite."""
