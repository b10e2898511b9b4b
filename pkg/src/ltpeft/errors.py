"""Error taxonomy shared by the library and the CLI."""

from typing import Any


class LtpeftError(Exception):
    """Base error; ``exit_code`` is what the CLI exits with."""

    exit_code = 1


class ConfigError(LtpeftError):
    """Invalid run configuration."""

    exit_code = 2

    def __init__(self, message: str, line: int | None = None) -> None:
        self.line = line
        prefix = f"line {line}: " if line is not None else ""
        super().__init__(f"{prefix}{message}")


class DependencyError(LtpeftError):
    """A pipeline stage is missing one of its inputs."""

    exit_code = 3


class CheckpointError(LtpeftError):
    """Checkpoint file is corrupt or belongs to a different backbone."""

    exit_code = 3


class NumericalError(LtpeftError):
    """Non-finite loss or gradient during training."""

    exit_code = 4

    def __init__(self, message: str, dump: dict[str, Any] | None = None) -> None:
        self.dump = dump or {}
        super().__init__(message)


class ShapeError(LtpeftError, ValueError):
    """Operand extents do not line up."""


class ContractError(LtpeftError):
    """An API precondition was violated."""


class DegenerateError(LtpeftError, ValueError):
    """Zero-norm query or key, or statistics undefined for the input."""


class CacheMissError(LtpeftError, KeyError):
    """Phase-2 forward asked for a phase-1 feature that was never cached."""


class DataError(LtpeftError):
    """Empty or malformed dataset."""
