"""Exception hierarchy.

The CLI maps these onto process exit codes: ``ConfigurationError`` -> 2,
``FormatError``/``FeatureIOError`` -> 3, ``DivergenceError`` -> 4.
"""


class PanoscanError(Exception):
    """Base class for all errors raised by the package."""


class ConfigurationError(PanoscanError, ValueError):
    """Invalid or inconsistent configuration.

    ``keys`` lists the dotted key paths involved, when known.
    """

    def __init__(self, message, keys=()):
        self.keys = tuple(keys)
        if self.keys:
            message = f"{message} [{', '.join(self.keys)}]"
        super().__init__(message)


class CoverageError(ConfigurationError):
    """The planned trajectory leaves canvas cells uncovered."""

    def __init__(self, message, report=None):
        super().__init__(message)
        self.report = report


class DimensionError(PanoscanError, ValueError):
    """Array shapes or lengths are inconsistent."""


class PlacementError(PanoscanError, ValueError):
    """A tile does not fit inside the canvas at its anchor."""

    def __init__(self, message, block=None):
        self.block = block
        if block is not None:
            message = f"block {block}: {message}"
        super().__init__(message)


class UsageError(PanoscanError, ValueError):
    """An operation was called with arguments outside its domain."""


class InsufficientPatchesError(UsageError):
    """Too few patches (or qualifying pairs) for a metric."""


class EnhancerError(PanoscanError, ValueError):
    """A tile enhancer produced output of the wrong shape."""


class DivergenceError(PanoscanError, ArithmeticError):
    """A numerical state became non-finite."""


class TrainingDivergedError(DivergenceError):
    """The flow-matching loss became non-finite during training."""

    def __init__(self, iteration, loss):
        self.iteration = iteration
        self.loss = loss
        super().__init__(f"training diverged at iteration {iteration} (loss={loss})")


class FormatError(PanoscanError, IOError):
    """Base class for binary container parse errors."""


class MagicError(FormatError):
    """Unexpected magic bytes."""


class VersionError(FormatError):
    """Unsupported container version."""


class HeaderError(FormatError):
    """Malformed or truncated header."""


class ElementCountError(FormatError):
    """Payload length disagrees with the declared shape."""

    def __init__(self, expected, found, name=None):
        self.expected = expected
        self.found = found
        where = f" in array {name!r}" if name is not None else ""
        super().__init__(f"element count mismatch{where}: expected {expected}, found {found}")


class NonFiniteError(FormatError):
    """Payload contains NaN or infinite values."""


class DuplicateNameError(FormatError):
    """Two arrays in one container share a name."""


class FeatureIOError(PanoscanError, IOError):
    """A required external feature file is missing or unreadable."""
