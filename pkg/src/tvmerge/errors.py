"""Exception types shared across the package."""


class MergeToolError(Exception):
    """Base class for all errors raised by this package."""


class ValidationError(MergeToolError, ValueError):
    """Invalid input data: bad shapes, budgets, scores, or corrupt streams."""


class ShapeMismatchError(ValidationError):
    """Two containers or arrays that must share a layout do not."""


class CodecError(ValidationError):
    """Malformed container stream: bad magic, truncation, NaN payload."""


class DegenerateInputError(MergeToolError, ValueError):
    """Numerically degenerate input, e.g. zero-norm mean or all-zero scores."""


class UsageError(MergeToolError):
    """Command-line misuse: missing or contradictory flags."""


class ConfigError(MergeToolError):
    """Malformed or incomplete configuration file."""
