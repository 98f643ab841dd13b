"""Centralized loguru configuration for training, attack and report runs.

Module Information:
    - Filename: utils_logger.py
    - Module: utils_logger
    - Location: src/task_blocking/

Key Concepts:
    - One configuration per process: stderr plus a rotating log file
    - Level from the argument, else TASK_BLOCKING_LOG_LEVEL, else INFO
    - Attack worker processes log to stderr at WARNING only
"""

import os
import pathlib
import sys

from loguru import logger

LOG_LEVEL_ENV = "TASK_BLOCKING_LOG_LEVEL"
DEFAULT_LOG_FILE = "task_blocking.log"
LOG_FORMAT = "{time:YYYY-MM-DD HH:mm}:{level:<7} AT {file}:{line}: {message}"

_is_configured: bool = False
_log_file_path: pathlib.Path | None = None


def _project_root(start: pathlib.Path | None = None) -> pathlib.Path:
    """Walk up until a pyproject.toml or .git appears; fall back to this file's folder."""
    here = (start or pathlib.Path(__file__)).resolve()
    for p in [here, *here.parents]:
        if (p / "pyproject.toml").exists() or (p / ".git").exists():
            return p
    return here.parent


project_root = _project_root()


def default_level() -> str:
    return os.environ.get(LOG_LEVEL_ENV, "INFO").upper()


def get_log_file_path() -> pathlib.Path:
    """Return the active log file, or where it will go once ``init_logger`` runs."""
    if _log_file_path is not None:
        return _log_file_path
    return project_root / DEFAULT_LOG_FILE


def init_logger(
    level: str | None = None,
    *,
    log_dir: str | pathlib.Path = project_root,
    log_file_name: str = DEFAULT_LOG_FILE,
) -> pathlib.Path:
    """Configure loguru once for this process and return the log file path.

    Args:
        level: Logging level such as "INFO" or "DEBUG"; None reads the environment.
        log_dir: Directory where the log file will be written.
        log_file_name: File name for the log file.

    Returns:
        pathlib.Path: The resolved path to the log file.
    """
    global _is_configured, _log_file_path
    if _is_configured and _log_file_path is not None:
        return _log_file_path

    level = level or default_level()
    log_folder = pathlib.Path(log_dir).expanduser().resolve()
    log_folder.mkdir(parents=True, exist_ok=True)
    log_file = log_folder / log_file_name

    try:
        logger.remove()
        logger.add(sys.stderr, level=level, format=LOG_FORMAT)
        logger.add(
            log_file,
            level=level,
            enqueue=True,
            backtrace=True,
            diagnose=False,
            rotation="10 MB",
            retention="7 days",
            encoding="utf-8",
            format=LOG_FORMAT,
        )
        logger.debug(f"Logging to file: {log_file}")
        _is_configured = True
        _log_file_path = log_file
    except Exception as e:
        logger.error(f"Error configuring logger to write to file: {e}")

    return log_file


def init_worker_logging() -> None:
    """Process-pool initializer: quiet stderr-only logging."""
    logger.remove()
    logger.add(sys.stderr, level="WARNING", format=LOG_FORMAT)


__all__ = [
    "DEFAULT_LOG_FILE",
    "LOG_LEVEL_ENV",
    "default_level",
    "get_log_file_path",
    "init_logger",
    "init_worker_logging",
    "logger",
    "project_root",
]
