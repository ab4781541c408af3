"""
Tests for module entry points and CLI integration.
"""

import contextlib
import io
import logging
import os
import subprocess
import sys
from unittest.mock import Mock, patch

import pytest

sys.path.insert(0, os.path.join(os.path.dirname(__file__), "..", "src"))

from ba2kit.cli import EXIT_COMPLIANCE, EXIT_CONFIG, EXIT_ERROR, main, setup_logging
from ba2kit.core.errors import ComplianceError, ConfigError

SRC = os.path.join(os.path.dirname(os.path.abspath(__file__)), "..", "src")


def run_module(*args):
    env = dict(os.environ)
    env["PYTHONPATH"] = SRC + os.pathsep + env.get("PYTHONPATH", "")
    return subprocess.run(
        [sys.executable, "-m", "ba2kit", *args],
        capture_output=True,
        text=True,
        timeout=60,
        env=env,
    )


@pytest.mark.cli
class TestModuleEntryPoint:
    """Test module entry points."""

    def test_module_help(self):
        result = run_module("--help")
        assert result.returncode == 0
        assert "budget-aware adapters" in result.stdout
        assert "run-benchmark" in result.stdout

    def test_module_version(self):
        result = run_module("--version")
        assert result.returncode == 0
        assert "ba2kit version" in result.stdout

    def test_module_pack(self):
        result = run_module("pack", "--bits", "1,0,1,1")
        assert result.returncode == 0
        assert result.stdout.strip() == "0d"

    def test_module_usage_error(self):
        assert run_module("no-such-command").returncode == 2


class TestLoggingSetup:
    """Test logging setup comprehensively."""

    def setup_method(self):
        self.logger = logging.getLogger("ba2kit")
        self.level = self.logger.level

    def teardown_method(self):
        self.logger.setLevel(self.level)

    def test_setup_logging_debug_mode(self):
        setup_logging(quiet=0, debug=True)
        assert self.logger.level == logging.DEBUG

    def test_setup_logging_verbose_mode(self):
        setup_logging(quiet=0, debug=False)
        assert self.logger.level == logging.INFO

    def test_setup_logging_quiet_mode(self):
        setup_logging(quiet=1, debug=False)
        assert self.logger.level == logging.WARNING

    def test_setup_logging_debug_overrides_quiet(self):
        setup_logging(quiet=1, debug=True)
        assert self.logger.level == logging.DEBUG


class TestCLIErrorPaths:
    """main() maps exceptions to exit codes."""

    def setup_method(self):
        self.level = logging.getLogger("ba2kit").level

    def teardown_method(self):
        logging.getLogger("ba2kit").setLevel(self.level)

    def _main_with(self, error, *extra):
        failing = Mock(side_effect=error)
        with patch.dict("ba2kit.cli.COMMANDS", {"verify": failing}):
            with contextlib.redirect_stderr(io.StringIO()):
                code = main(["verify", *extra])
        failing.assert_called_once()
        return code

    def test_unexpected_exception(self):
        assert self._main_with(RuntimeError("boom")) == EXIT_ERROR

    def test_unexpected_exception_with_debug(self):
        assert self._main_with(RuntimeError("boom"), "--debug") == EXIT_ERROR

    def test_config_error(self):
        assert self._main_with(ConfigError("bad")) == EXIT_CONFIG

    def test_compliance_error(self):
        assert self._main_with(ComplianceError("over budget")) == EXIT_COMPLIANCE
