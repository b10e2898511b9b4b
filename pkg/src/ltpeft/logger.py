"""Structured logging system for ltpeft."""

import logging
import sys
from datetime import datetime
from pathlib import Path
from typing import Any

LOG_NAME = "ltpeft"
LOG_FILE_NAME = "ltpeft.log"

# Structured fields rendered after the message, in this order
STRUCTURED_FIELDS = ("phase", "epoch", "step", "loss", "lr", "expert", "operation", "count")


class StructuredFormatter(logging.Formatter):
    """Custom formatter for structured logging."""

    def format(self, record: logging.LogRecord) -> str:
        """Format log record with structured data."""
        timestamp = datetime.fromtimestamp(record.created).isoformat()
        level = record.levelname
        message = record.getMessage()

        extras = []
        for field in STRUCTURED_FIELDS:
            if hasattr(record, field):
                value = getattr(record, field)
                if isinstance(value, float):
                    value = f"{value:.6g}"
                extras.append(f"{field}={value}")

        extra_str = f" [{', '.join(extras)}]" if extras else ""
        return f"{timestamp} {level:8} {message}{extra_str}"


def setup_logger(verbose: bool = False, log_file: Path | None = None) -> logging.Logger:
    """Set up the logger with file and optional console output.

    Args:
        verbose: If True, also log to console
        log_file: Where to write the structured log (no file handler if None)

    Returns:
        Configured logger instance

    """
    logger = logging.getLogger(LOG_NAME)
    logger.setLevel(logging.DEBUG)

    for handler in list(logger.handlers):
        handler.close()
    logger.handlers.clear()

    if log_file is not None:
        log_file.parent.mkdir(parents=True, exist_ok=True)
        file_handler = logging.FileHandler(log_file, encoding="utf-8")
        file_handler.setLevel(logging.INFO)
        file_handler.setFormatter(StructuredFormatter())
        logger.addHandler(file_handler)

    if verbose:
        console_handler = logging.StreamHandler(sys.stderr)
        console_handler.setLevel(logging.DEBUG)
        console_handler.setFormatter(logging.Formatter("%(levelname)s: %(message)s"))
        logger.addHandler(console_handler)

    if not logger.handlers:
        logger.addHandler(logging.NullHandler())

    return logger


def log_operation(logger: logging.Logger, operation: str, **kwargs: Any) -> None:
    """Log an operation with structured data.

    Args:
        logger: Logger instance
        operation: Operation name (e.g., 'pretrain', 'phase1', 'gen-data')
        **kwargs: Additional structured data (phase, count, expert, etc.)

    """
    logger.info(f"Operation: {operation}", extra={"operation": operation, **kwargs})


def log_epoch(
    logger: logging.Logger, phase: str, epoch: int, loss: float, lr: float
) -> None:
    """Log the end of a training epoch.

    Args:
        logger: Logger instance
        phase: Training phase tag
        epoch: Epoch just finished (1-based)
        loss: Mean training loss over the epoch
        lr: Learning rate at the last step of the epoch

    """
    logger.info(
        f"{phase} epoch {epoch} done",
        extra={"phase": phase, "epoch": epoch, "loss": loss, "lr": lr},
    )


def log_error(logger: logging.Logger, message: str, **kwargs: Any) -> None:
    """Log an error with structured data.

    Args:
        logger: Logger instance
        message: Error message
        **kwargs: Additional context

    """
    logger.error(message, extra=kwargs)
