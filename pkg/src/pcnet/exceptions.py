"""Exception hierarchy.

The CLI maps these onto exit codes: configuration/plan problems exit 1,
data problems exit 2, numerical failures exit 3.
"""


class PCNError(Exception):
    """Base class for every error raised by pcnet."""


class DimensionError(PCNError, ValueError):
    """Tensor extents do not line up."""


class NumericalError(PCNError, ArithmeticError):
    """Non-finite values, or an iterative method failed to converge."""


class ConfigError(PCNError, ValueError):
    """Invalid run configuration, CLI arguments or architecture name."""


class PlanError(ConfigError):
    """A transform plan violates its constraints."""


class CheckpointError(PCNError, IOError):
    """Corrupt, truncated or incompatible checkpoint / tensor file."""


class DataError(PCNError, IOError):
    """Dataset files missing, truncated or malformed."""
