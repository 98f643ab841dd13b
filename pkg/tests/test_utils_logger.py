"""Test the logger utility module.

Module Information:
    - Filename: test_utils_logger.py
    - Module: test_utils_logger
    - Location: tests/

Testing logging is important because:
    - Training and attack runs are long; the log is the record of what happened
    - Worker processes must stay quiet without losing warnings
"""

import io
from pathlib import Path
import sys

from task_blocking import utils_logger


def test_logger_initialization():
    """Verify logger can be initialized with default settings."""
    path = utils_logger.init_logger()
    assert utils_logger.logger is not None
    assert isinstance(path, Path)


def test_logger_initialization_is_idempotent():
    """A second call returns the same file instead of adding sinks."""
    first = utils_logger.init_logger()
    second = utils_logger.init_logger(level="DEBUG")
    assert first == second
    assert utils_logger.get_log_file_path() == first


def test_log_file_path_exists():
    """Verify log file path is created correctly."""
    log_path = utils_logger.get_log_file_path()
    assert isinstance(log_path, Path)
    assert log_path.name == utils_logger.DEFAULT_LOG_FILE


def test_default_level_reads_environment(monkeypatch):
    monkeypatch.setenv(utils_logger.LOG_LEVEL_ENV, "debug")
    assert utils_logger.default_level() == "DEBUG"
    monkeypatch.delenv(utils_logger.LOG_LEVEL_ENV)
    assert utils_logger.default_level() == "INFO"


def test_worker_logging_keeps_warnings(monkeypatch):
    buffer = io.StringIO()
    monkeypatch.setattr(sys, "stderr", buffer)
    utils_logger.init_worker_logging()
    utils_logger.logger.info("hidden")
    utils_logger.logger.warning("shown")
    monkeypatch.undo()

    # restore the process-wide sinks for the remaining tests
    monkeypatch.setattr(utils_logger, "_is_configured", False)
    utils_logger.init_logger()

    text = buffer.getvalue()
    assert "shown" in text and "hidden" not in text
