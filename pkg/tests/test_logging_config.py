"""Tests for structured logging and the certificate log."""

import json
import logging
from pathlib import Path

import pytest

import sys
sys.path.insert(0, str(Path(__file__).parent.parent / "src"))

from logging_config import JSONFormatter, setup_logging


@pytest.fixture
def logs(tmp_path):
    logger, certificates = setup_logging(app_name="bdo_test", log_level="INFO", log_dir=tmp_path)
    yield logger, certificates, tmp_path
    for name in ("bdo_test", "bdo_test.certificates"):
        for handler in logging.getLogger(name).handlers:
            handler.close()
        logging.getLogger(name).handlers.clear()


def read_lines(path: Path) -> list[dict]:
    for handler in logging.getLogger("bdo_test").handlers + logging.getLogger("bdo_test.certificates").handlers:
        handler.flush()
    return [json.loads(line) for line in path.read_text().splitlines() if line.strip()]


class TestJSONFormatter:
    """Formatting of single records."""

    def test_fields_and_context(self):
        """Test the base fields and analysis context are emitted."""
        record = logging.makeLogRecord(
            {"name": "bdo_tool", "levelname": "INFO", "msg": "norm %s", "args": ("done",), "analysis": "norms"}
        )
        entry = json.loads(JSONFormatter().format(record))
        assert entry["message"] == "norm done"
        assert entry["level"] == "INFO"
        assert entry["analysis"] == "norms"
        assert set(entry["source"]) == {"file", "line", "function"}
        assert "exception" not in entry

    def test_exception(self):
        """Test exception type and message are recorded."""
        try:
            raise ValueError("bad window")
        except ValueError:
            record = logging.makeLogRecord(
                {"name": "bdo_tool", "levelname": "ERROR", "msg": "failed", "exc_info": sys.exc_info()}
            )
        entry = json.loads(JSONFormatter().format(record))
        assert entry["exception"]["type"] == "ValueError"
        assert entry["exception"]["message"] == "bad window"


class TestSetupLogging:
    """Handlers attached by setup_logging."""

    def test_files_created(self, logs):
        """Test the main, error and certificate files exist."""
        _, _, log_dir = logs
        names = sorted(p.name for p in log_dir.iterdir())
        assert names == ["bdo_test.log", "bdo_test_certificates.log", "bdo_test_errors.log"]

    def test_certificates_go_to_their_own_file(self, logs):
        """Test certificate events are not propagated to the main log."""
        logger, certificates, log_dir = logs
        logger.info("run started")
        certificates.verdict_issued("inconclusive", 2)
        main = read_lines(log_dir / "bdo_test.log")
        events = read_lines(log_dir / "bdo_test_certificates.log")
        assert [e["message"] for e in main] == ["run started"]
        assert events[0]["extra"]["certificate_event"] == "verdict.issued"
        assert events[0]["extra"]["certificate_details"] == {"verdict": "inconclusive", "caveats": 2}

    def test_errors_file_only_errors(self, logs):
        """Test the error log keeps ERROR and above."""
        logger, _, log_dir = logs
        logger.warning("slow patch")
        logger.error("invariant failed")
        assert [e["message"] for e in read_lines(log_dir / "bdo_test_errors.log")] == ["invariant failed"]
