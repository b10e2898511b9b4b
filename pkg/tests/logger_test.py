"""Tests for logger module."""

import logging
from collections.abc import Iterator
from pathlib import Path

import pytest

from ltpeft.logger import (
    LOG_NAME,
    StructuredFormatter,
    log_epoch,
    log_error,
    log_operation,
    setup_logger,
)


def _record(message: str = "Test message") -> logging.LogRecord:
    return logging.LogRecord(
        name="test",
        level=logging.INFO,
        pathname="test.py",
        lineno=1,
        msg=message,
        args=(),
        exc_info=None,
    )


@pytest.fixture(autouse=True)
def reset_logger() -> Iterator[None]:
    """Leave the package logger without handlers after every test."""
    yield
    logger = logging.getLogger(LOG_NAME)
    for handler in list(logger.handlers):
        handler.close()
    logger.handlers.clear()


class TestStructuredFormatter:
    """Test StructuredFormatter."""

    @staticmethod
    def test_format_basic_message():
        """Format a basic log message without extras."""
        result = StructuredFormatter().format(_record())
        assert "INFO" in result
        assert "Test message" in result
        assert "[" not in result

    @staticmethod
    def test_format_with_epoch_fields():
        """Format training fields in a fixed order."""
        record = _record()
        record.loss = 0.123456789
        record.phase = "phase1"
        record.epoch = 3
        result = StructuredFormatter().format(record)
        assert result.endswith("[phase=phase1, epoch=3, loss=0.123457]")

    @staticmethod
    def test_unknown_attributes_are_ignored():
        """Only the structured fields are rendered."""
        record = _record()
        record.package = "lodash"
        assert "package" not in StructuredFormatter().format(record)


class TestSetupLogger:
    """Test setup_logger."""

    def test_file_handler(self, tmp_path: Path) -> None:
        """A log file is created under its directory."""
        log_file = tmp_path / "runs" / "ltpeft.log"
        logger = setup_logger(log_file=log_file)
        log_operation(logger, "gen-data", count=5)
        for handler in logger.handlers:
            handler.flush()
        text = log_file.read_text(encoding="utf-8")
        assert "Operation: gen-data" in text
        assert "operation=gen-data, count=5" in text

    def test_no_handlers_means_null(self) -> None:
        """Without a file or console the logger stays silent."""
        logger = setup_logger()
        assert len(logger.handlers) == 1
        assert isinstance(logger.handlers[0], logging.NullHandler)

    def test_verbose_adds_console(self, tmp_path: Path) -> None:
        """Verbose mode adds a stderr handler."""
        logger = setup_logger(verbose=True, log_file=tmp_path / "x.log")
        assert len(logger.handlers) == 2
        assert any(type(h) is logging.StreamHandler for h in logger.handlers)

    def test_repeated_setup_replaces_handlers(self, tmp_path: Path) -> None:
        """Calling setup twice does not stack handlers."""
        setup_logger(log_file=tmp_path / "a.log")
        logger = setup_logger(log_file=tmp_path / "b.log")
        assert len(logger.handlers) == 1


class TestHelpers:
    """Test the logging helpers."""

    def test_log_epoch(self, tmp_path: Path) -> None:
        log_file = tmp_path / "ltpeft.log"
        logger = setup_logger(log_file=log_file)
        log_epoch(logger, "phase2", 4, 1.25, 0.001)
        for handler in logger.handlers:
            handler.flush()
        line = log_file.read_text(encoding="utf-8").strip()
        assert "phase2 epoch 4 done" in line
        assert "[phase=phase2, epoch=4, loss=1.25, lr=0.001]" in line

    def test_log_error(self, tmp_path: Path) -> None:
        log_file = tmp_path / "ltpeft.log"
        logger = setup_logger(log_file=log_file)
        log_error(logger, "phase2 failed", operation="phase2")
        for handler in logger.handlers:
            handler.flush()
        line = log_file.read_text(encoding="utf-8")
        assert "ERROR" in line
        assert "operation=phase2" in line
