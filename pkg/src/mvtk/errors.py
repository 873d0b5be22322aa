"""Exception hierarchy.

Every error raised on purpose by the library derives from :class:`MvtkError`
so callers (and the CLI) can tell library failures apart from bugs.
"""


class MvtkError(Exception):
    """Base class for all library errors."""


class ShapeError(MvtkError, ValueError):
    """An operand has the wrong shape.

    ``dim`` names the offending dimension (e.g. ``"Cin"`` or ``"H"``) when
    one can be singled out.
    """

    def __init__(self, message, dim=None):
        super().__init__(message)
        self.dim = dim


class ConfigError(MvtkError, ValueError):
    """An architecture spec or flag combination is invalid."""

    def __init__(self, message, stage=None):
        super().__init__(message)
        self.stage = stage


class FormatError(MvtkError, ValueError):
    """A binary or text file does not follow its documented format."""


class GradientError(MvtkError, RuntimeError):
    """Backward pass could not run (non-scalar loss, non-finite values...)."""


class DivergenceError(MvtkError, RuntimeError):
    """Training produced a non-finite loss."""

    def __init__(self, message, step=None):
        super().__init__(message)
        self.step = step


class ResourceError(MvtkError, MemoryError):
    """A requested workload does not fit in available memory."""
