"""Exception types shared across the package.

The CLI maps these to exit codes: ConfigError and I/O problems exit 1,
ContaminationError exits 2, NumericAbort exits 3.
"""


class DimensionError(ValueError):
    """Tensor shapes do not satisfy an operation's contract."""


class ConfigError(ValueError):
    """A configuration value violates a documented constraint."""


class InvalidBoxError(ValueError):
    """A bounding box is degenerate or outside its allowed range."""


class SamplingError(RuntimeError):
    """A dataset cannot supply the requested episode (e.g. too few instances)."""


class ContaminationError(RuntimeError):
    """A novel class leaked into a stage that must never observe it."""


class NumericAbort(ArithmeticError):
    """Training produced a non-finite loss and was stopped."""
