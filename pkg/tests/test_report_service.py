"""Tests for analysis runs, reports and the analyze command."""

import json
from pathlib import Path

import pytest
from click.testing import CliRunner

import sys
sys.path.insert(0, str(Path(__file__).parent.parent / "src"))

from cli.analyze import analyze
from config import Config
from errors import ConfigError
from fixtures import DECAYING_FREDHOLM_CONFIG, MINIMAL_CONFIG, SHIFT_FREDHOLM_CONFIG, TRIDIAGONAL_CONFIG
from services.config_schema import parse_config
from services.report_service import claim, dumps_report, normalize, run


class TestNormalize:
    """Deterministic JSON encoding."""

    def test_significant_digits(self):
        """Test floats are rounded to twelve significant digits."""
        assert normalize(1 / 3) == 0.333333333333
        assert normalize({"a": [2.0, 1e-20 / 3]}) == {"a": [2.0, 3.33333333333e-21]}

    def test_non_finite(self):
        """Test inf and nan are written as strings."""
        assert normalize([float("inf"), float("-inf"), float("nan")]) == ["inf", "-inf", "nan"]

    def test_sorted_keys(self):
        """Test keys are sorted in the dump."""
        text = dumps_report({"b": 1, "a": claim(0.5, "exact")})
        assert text.index('"a"') < text.index('"b"')
        assert json.loads(text)["a"] == {"tag": "exact", "value": 0.5}


class TestRun:
    """Running configured analyses."""

    def test_tridiagonal_run(self, tmp_path):
        """Test every local analysis succeeds on the (1, 2, 1) stencil."""
        result = run(parse_config(TRIDIAGONAL_CONFIG), out_dir=tmp_path)
        analyses = result.report["analyses"]
        assert result.failures == []
        assert all(analyses[name]["status"] == "ok" for name in TRIDIAGONAL_CONFIG["analyses"])
        assert analyses["norms"]["op_norm"]["pinf"] == {"value": 4.0, "tag": "exact"}
        assert analyses["decompose"]["within_limit"]
        assert analyses["smoothing"]["within_bound"] and analyses["smoothing"]["contractive"]
        assert all(row["holds"] for row in analyses["lower-norms"]["localization"])
        assert result.report_path == tmp_path / "tridiagonal_report.json"
        names = sorted(p.name for p in result.side_files)
        assert names == ["tridiagonal_nu_curve.csv", "tridiagonal_ql_curve.csv", "tridiagonal_smoothing.csv"]
        assert all(p.exists() for p in result.side_files)

    def test_reports_are_deterministic(self, tmp_path):
        """Test two runs with the same seed write byte-identical reports."""
        cfg = parse_config(TRIDIAGONAL_CONFIG)
        first = run(cfg, out_dir=tmp_path / "one").report_path.read_bytes()
        second = run(cfg, out_dir=tmp_path / "two").report_path.read_bytes()
        assert first == second

    def test_thread_count_does_not_change_report(self, tmp_path):
        """Test one and two worker threads write byte-identical reports."""
        cfg = parse_config(TRIDIAGONAL_CONFIG)
        single = run(cfg, out_dir=tmp_path / "one", threads=1).report_path.read_bytes()
        double = run(cfg, out_dir=tmp_path / "two", threads=2).report_path.read_bytes()
        assert single == double

    def test_report_echoes_settings(self, tmp_path):
        """Test the report records seed, tolerances and node counts."""
        result = run(parse_config(DECAYING_FREDHOLM_CONFIG), out_dir=tmp_path, seed=11, threads=2)
        document = json.loads(result.report_path.read_text())
        assert document["seed"] == 11
        assert "threads" not in document
        assert document["operator"]["terms"][0]["node_count"] == 7
        assert document["tolerances"]["richness"] == Config.RICHNESS_TOL
        assert document["directions"] == ["+x0", "-x0"]
        assert "timestamp" not in result.report_path.read_text()

    def test_decaying_fredholm_run(self, tmp_path):
        """Test the limit, parametrix and verdict analyses on 2 + 1/(1+x^2)."""
        result = run(parse_config(DECAYING_FREDHOLM_CONFIG), out_dir=tmp_path)
        analyses = result.report["analyses"]
        assert result.failures == []
        assert analyses["limits"]["rich"]
        assert analyses["limits"]["sampled"] is True
        assert analyses["parametrix"]["metrics"]["M"]["tag"] == "certified"
        assert analyses["fredholm"]["verdict"] == "consistent-with-Fredholm"
        names = {p.name for p in result.side_files}
        assert "decaying_defect_curve.csv" in names
        assert "decaying_finite_section.csv" in names

    def test_failures_are_recorded(self, tmp_path, make_config):
        """Test a failing analysis is reported and the run continues."""
        cfg = parse_config(make_config(SHIFT_FREDHOLM_CONFIG, analyses=["norms", "parametrix", "fredholm"]))
        result = run(cfg, out_dir=tmp_path)
        assert [f["analysis"] for f in result.failures] == ["parametrix"]
        assert result.failures[0]["error"] == "ParametrixError"
        assert not result.invariant_violated
        analyses = result.report["analyses"]
        assert analyses["parametrix"]["status"] == "failed"
        assert analyses["norms"]["status"] == "ok"
        assert analyses["fredholm"]["verdict"] == "not-Fredholm"

    def test_duplicate_direction_labels(self, tmp_path, make_config):
        """Test explicit directions may not reuse a coordinate-ray label."""
        document = make_config(
            DECAYING_FREDHOLM_CONFIG, analyses=["limits"], directions=[{"label": "+x0", "ray": [2]}]
        )
        with pytest.raises(ConfigError, match="duplicate labels"):
            run(parse_config(document), out_dir=tmp_path)

    def test_output_dir_from_config(self, tmp_path, make_config):
        """Test output.dir is resolved against the config directory."""
        cfg = parse_config(make_config(MINIMAL_CONFIG, output={"dir": "reports", "csv": False}))
        result = run(cfg, base_dir=tmp_path)
        assert result.report_path == tmp_path / "reports" / "analysis_report.json"
        assert result.side_files == []


@pytest.mark.integration
class TestAnalyzeCommand:
    """The click entry point."""

    @pytest.fixture(autouse=True)
    def quiet_logs(self, tmp_path, monkeypatch):
        monkeypatch.setattr(Config, "LOG_DIR", tmp_path / "logs")
        monkeypatch.setattr(Config, "LOG_LEVEL", "WARNING")

    def write(self, path: Path, document: dict) -> Path:
        path.write_text(json.dumps(document))
        return path

    def test_success(self, tmp_path):
        """Test a valid config exits 0 and prints the report path."""
        config_path = self.write(tmp_path / "cfg.json", MINIMAL_CONFIG)
        result = CliRunner().invoke(analyze, [str(config_path), "--out", str(tmp_path / "out")])
        assert result.exit_code == 0, result.output
        assert "analysis_report.json" in result.output
        assert (tmp_path / "out" / "analysis_report.json").exists()

    def test_invalid_config(self, tmp_path, make_config):
        """Test schema violations exit 2 and are listed."""
        config_path = self.write(tmp_path / "cfg.json", make_config(MINIMAL_CONFIG, analyses=["fredholm"]))
        result = CliRunner().invoke(analyze, [str(config_path), "--out", str(tmp_path / "out")])
        assert result.exit_code == 2
        assert "directions: required by fredholm" in result.output

    def test_failed_analysis_still_exits_zero(self, tmp_path, make_config):
        """Test recorded analysis failures do not change the exit code."""
        document = make_config(SHIFT_FREDHOLM_CONFIG, analyses=["parametrix"])
        config_path = self.write(tmp_path / "cfg.json", document)
        result = CliRunner().invoke(analyze, [str(config_path), "--out", str(tmp_path / "out")])
        assert result.exit_code == 0
        assert "parametrix failed: ParametrixError" in result.output

    def test_threads_must_be_positive(self, tmp_path):
        """Test --threads 0 is a usage error."""
        config_path = self.write(tmp_path / "cfg.json", MINIMAL_CONFIG)
        result = CliRunner().invoke(analyze, [str(config_path), "--threads", "0"])
        assert result.exit_code == 2
