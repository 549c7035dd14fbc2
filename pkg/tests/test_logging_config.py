"""Tests for logging setup and the uncaught-exception hook."""

import logging
import sys

from kiop.logging_config import _exception_hook, attach_run_log, get_logger, setup_logging


class TestLoggingIntegration:
    """Logging setup writes the run log and installs the hook."""

    def test_run_log_written(self, tmp_path, kiop_logger, preserve_excepthook):
        setup_logging(log_level="DEBUG", log_dir=tmp_path, console_output=False)
        get_logger("storing").debug("iteration finished")
        for handler in kiop_logger.handlers:
            handler.flush()

        content = (tmp_path / "run.log").read_text(encoding="utf-8")
        assert "iteration finished" in content
        assert "kiop.storing" in content
        assert sys.excepthook is _exception_hook

    def test_env_level_wins(self, monkeypatch, kiop_logger, preserve_excepthook):
        monkeypatch.setenv("KIOP_LOG_LEVEL", "WARNING")
        logger = setup_logging(log_level="DEBUG", console_output=False)
        assert logger.level == logging.WARNING

    def test_attach_run_log_once(self, tmp_path, kiop_logger, preserve_excepthook):
        setup_logging(console_output=False)
        attach_run_log(tmp_path)
        attach_run_log(tmp_path)
        assert len(kiop_logger.handlers) == 1
        assert (tmp_path / "run.log").exists()


def test_exception_hook_reports(capsys, kiop_logger, preserve_excepthook):
    """The hook prints the exception type and message to stderr."""
    setup_logging(console_output=False)
    try:
        raise ValueError("ring widths must be even")
    except ValueError:
        _exception_hook(*sys.exc_info())
    captured = capsys.readouterr()
    assert "ValueError: ring widths must be even" in captured.err


def test_get_logger_strips_package_prefix():
    """Module names inside the package map to a single ``kiop.`` prefix."""
    assert get_logger("kiop.synthesis").name == "kiop.synthesis"
    assert get_logger("synthesis").name == "kiop.synthesis"
