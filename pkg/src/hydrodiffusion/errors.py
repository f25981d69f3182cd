"""Exception hierarchy for HydroDiffusion and its mapping onto CLI exit codes.

Exit codes:
    0  success
    2  usage or input error (bad arguments, config, files, checkpoints)
    3  numerical failure (non-finite losses, sampler blow-up, divergence)
"""

from __future__ import annotations

EXIT_OK = 0
EXIT_INPUT = 2
EXIT_NUMERIC = 3


class HydroDiffusionError(Exception):
    """Base class for every error raised by this package."""


# ---------------------------------------------------------------------------
# Input errors (exit 2)
# ---------------------------------------------------------------------------


class ArgumentError(HydroDiffusionError, ValueError):
    """Raised when an argument violates an operation's precondition."""


class ConfigError(HydroDiffusionError, ValueError):
    """Raised when a run configuration cannot be loaded or validated."""


class ParseError(HydroDiffusionError, ValueError):
    """Raised when a CSV file cannot be parsed.

    Attributes:
        line: 1-based line number of the offending row, when known.
    """

    def __init__(self, message: str, line: int | None = None) -> None:
        self.line = line
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)


class EmptyRecordError(ParseError):
    """Raised when a basin file has a header but no data rows."""


class CheckpointError(HydroDiffusionError, ValueError):
    """Raised when a checkpoint is corrupt or does not match the request."""


# ---------------------------------------------------------------------------
# Numerical errors (exit 3)
# ---------------------------------------------------------------------------


class NumericError(HydroDiffusionError, ArithmeticError):
    """Raised when a computation produces non-finite values.

    Attributes:
        step: sampler step index or optimizer step, when relevant.
        member: ensemble member index, when relevant.
    """

    def __init__(
        self, message: str, step: int | None = None, member: int | None = None
    ) -> None:
        self.step = step
        self.member = member
        details = []
        if member is not None:
            details.append(f"member {member}")
        if step is not None:
            details.append(f"step {step}")
        if details:
            message = f"{message} ({', '.join(details)})"
        super().__init__(message)


class TrainingDivergedError(NumericError):
    """Raised when the training loss becomes non-finite."""

    def __init__(self, message: str, epoch: int, step: int) -> None:
        self.epoch = epoch
        super().__init__(f"{message} at epoch {epoch}", step=step)


class UndefinedMetricError(HydroDiffusionError, ArithmeticError):
    """Raised when a verification metric has a zero denominator."""


class UndefinedTestError(UndefinedMetricError):
    """Raised when a significance test has no usable observations."""


def exit_code_for(exc: BaseException) -> int:
    """Map an exception to the CLI exit code contract."""
    if isinstance(exc, NumericError):
        return EXIT_NUMERIC
    if isinstance(exc, (HydroDiffusionError, OSError, ValueError)):
        return EXIT_INPUT
    return 1
