"""
Logging configuration for kiop.
Provides centralized logging setup with console and per-run file handlers.
"""
import logging
import os
import sys
import traceback
from logging.handlers import RotatingFileHandler
from pathlib import Path
from typing import Optional

_FILE_FORMAT = '%(asctime)s - %(name)s - %(levelname)s - %(filename)s:%(lineno)d - %(message)s'
_CONSOLE_FORMAT = '%(asctime)s - %(levelname)s - %(message)s'


def _exception_hook(exc_type, exc_value, exc_traceback):
    """Route uncaught exceptions through the ``kiop`` logger.

    Args:
        exc_type: Exception type
        exc_value: Exception instance
        exc_traceback: Traceback object
    """
    if issubclass(exc_type, KeyboardInterrupt):
        sys.__excepthook__(exc_type, exc_value, exc_traceback)
        return

    logger = logging.getLogger("kiop")
    formatted_tb = "".join(traceback.format_exception(exc_type, exc_value, exc_traceback))
    logger.critical("Uncaught exception: %s: %s\n%s", exc_type.__name__, exc_value, formatted_tb)

    try:
        sys.stderr.write(f"{exc_type.__name__}: {exc_value}\n")
        sys.stderr.flush()
    except Exception:
        sys.__excepthook__(exc_type, exc_value, exc_traceback)


def setup_logging(
    log_level: str = "INFO",
    log_dir: Optional[Path] = None,
    console_output: bool = True
) -> logging.Logger:
    """
    Configure the ``kiop`` logger for one CLI invocation or training run.

    Args:
        log_level: Logging level (DEBUG, INFO, WARNING, ERROR, CRITICAL)
        log_dir: Directory for ``run.log``; no file handler when None
        console_output: Whether to output logs to console

    Returns:
        The package logger
    """
    env_level = os.getenv("KIOP_LOG_LEVEL")
    if env_level:
        log_level = env_level

    logger = logging.getLogger("kiop")
    logger.setLevel(getattr(logging, log_level.upper()))
    logger.handlers.clear()
    logger.propagate = False

    if log_dir is not None:
        log_dir = Path(log_dir)
        log_dir.mkdir(parents=True, exist_ok=True)
        file_handler = RotatingFileHandler(
            log_dir / "run.log",
            maxBytes=10 * 1024 * 1024,  # 10MB
            backupCount=3,
            encoding='utf-8'
        )
        file_handler.setLevel(logging.DEBUG)
        file_handler.setFormatter(logging.Formatter(_FILE_FORMAT, datefmt='%Y-%m-%d %H:%M:%S'))
        logger.addHandler(file_handler)

    if console_output:
        console_handler = logging.StreamHandler(sys.stderr)
        console_handler.setLevel(logging.INFO)
        console_handler.setFormatter(logging.Formatter(_CONSOLE_FORMAT, datefmt='%H:%M:%S'))
        logger.addHandler(console_handler)

    sys.excepthook = _exception_hook

    if log_dir is not None:
        logger.info(f"Logging configured. Log file: {Path(log_dir) / 'run.log'}")
    return logger


def attach_run_log(log_dir: Path) -> None:
    """Add a ``run.log`` file handler without dropping existing handlers.

    Args:
        log_dir: Run directory receiving the log file
    """
    logger = logging.getLogger("kiop")
    target = str(Path(log_dir) / "run.log")
    for handler in logger.handlers:
        if isinstance(handler, RotatingFileHandler) and handler.baseFilename == os.path.abspath(target):
            return
    Path(log_dir).mkdir(parents=True, exist_ok=True)
    handler = RotatingFileHandler(target, maxBytes=10 * 1024 * 1024, backupCount=3, encoding='utf-8')
    handler.setLevel(logging.DEBUG)
    handler.setFormatter(logging.Formatter(_FILE_FORMAT, datefmt='%Y-%m-%d %H:%M:%S'))
    logger.addHandler(handler)


def get_logger(name: str) -> logging.Logger:
    """
    Child of the ``kiop`` logger for a package module.

    Args:
        name: Module name (e.g., __name__)

    Returns:
        Logger instance
    """
    if name.startswith("kiop."):
        name = name[len("kiop."):]
    return logging.getLogger(f"kiop.{name}")


_default_logger = None


def get_default_logger() -> logging.Logger:
    """Get or create the default (console-only) logger instance."""
    global _default_logger
    if _default_logger is None:
        _default_logger = setup_logging()
    return _default_logger
