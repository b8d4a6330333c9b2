"""Shared exception types.

Plain ValueError is used for simple argument validation; the classes here mark
failure modes callers are expected to catch or report distinctly.
"""


class ConfigError(ValueError):
    """Invalid grammar, experiment, or framework configuration."""


class SchemaError(ValueError):
    """Act or attribute not present in the dialogue-act schema."""


class ShapeError(ValueError):
    """Array dimensions inconsistent with the model parameters."""


class NumericError(RuntimeError):
    """Non-finite value encountered; message names the offending tensor."""


class ContractViolation(RuntimeError):
    """A documented precondition was observably broken at runtime."""


class ParseError(ValueError):
    """Malformed input file; carries the 1-based line number."""

    def __init__(self, message, line_no=None):
        if line_no is not None:
            message = f"line {line_no}: {message}"
        super().__init__(message)
        self.line_no = line_no


class TrainingError(RuntimeError):
    """Training diverged (non-finite loss) or could not proceed."""


class DegenerateDistributionError(RuntimeError):
    """No candidate in the step distribution exceeded the probability floor."""


class RangeError(ValueError):
    """Requested target lies outside the achievable interval."""

    def __init__(self, message, low=None, high=None):
        super().__init__(message)
        self.low = low
        self.high = high
