"""Exception types shared across the package.

The CLI maps these onto its stable exit codes, so new failure modes should
reuse one of the classes below instead of raising bare ValueErrors.
"""


class WidecapError(Exception):
    """Base class for all package-specific errors."""


class ShapeError(WidecapError):
    """Operands have incompatible shapes; message carries both shapes."""


class ContractError(WidecapError):
    """A documented precondition was violated by the caller."""


class ConfigError(WidecapError):
    """An encoder or scheme configuration is internally inconsistent."""


class NumericError(WidecapError):
    """A forward op produced NaN or Inf (CLI exit code 5)."""


class OutOfWindowError(WidecapError):
    """A position fell outside an absolute encoding table."""

    def __init__(self, position: int, window: int):
        self.position = position
        self.window = window
        super().__init__(
            f"position {position} is outside the absolute window of {window} tokens"
        )


class DegenerateInputError(WidecapError):
    """An input is degenerate for the requested op (zero vector, empty row)."""


class CorpusParseError(WidecapError):
    """A corpus file line could not be parsed; message names the line."""


class PhaseError(WidecapError):
    """A checkpoint's phase tag does not match the requested pipeline stage."""
