"""Structured logging for bdo-tool.

Services only ask for loggers (``get_logger``, ``get_certificate_logger``);
handlers are attached once by the CLI through ``setup_logging``.
"""

import json
import logging
import logging.handlers
import sys
import traceback
from datetime import datetime, timezone
from pathlib import Path
from typing import Any

from config import get_config

UTC = timezone.utc

# Record attributes copied to the top level of a JSON line when present
CONTEXT_FIELDS = ("analysis", "operator_label", "direction")

HUMAN_FORMAT = "%(asctime)s | %(levelname)-8s | %(name)s | %(message)s"


class JSONFormatter(logging.Formatter):
    """One JSON object per record."""

    def __init__(self, include_traceback: bool = True):
        super().__init__()
        self.include_traceback = include_traceback

    def format(self, record: logging.LogRecord) -> str:
        entry: dict[str, Any] = {
            "timestamp": datetime.now(UTC).isoformat(),
            "level": record.levelname,
            "logger": record.name,
            "message": record.getMessage(),
            "source": {"file": record.filename, "line": record.lineno, "function": record.funcName},
        }
        for name in CONTEXT_FIELDS:
            if hasattr(record, name):
                entry[name] = getattr(record, name)
        if hasattr(record, "extra"):
            entry["extra"] = record.extra

        if record.exc_info and self.include_traceback:
            exc_type, exc, tb = record.exc_info
            entry["exception"] = {
                "type": exc_type.__name__ if exc_type else None,
                "message": str(exc) if exc else None,
                "traceback": traceback.format_exception(exc_type, exc, tb),
            }

        # numpy scalars and paths fall back to str
        return json.dumps(entry, default=str)


class CertificateLogger:
    """Dedicated logger for every quantitative bound the toolkit checks."""

    def __init__(self, logger: logging.Logger):
        self.logger = logger

    def _log(self, event: str, details: dict[str, Any]):
        """Log a certificate event."""
        extra = {
            "certificate_event": event,
            "certificate_details": details,
        }
        self.logger.info(f"CERTIFICATE: {event}", extra={"extra": extra})

    # Partitions of unity
    def partition_certified(self, r: float, eps: float, variation: float, width: int | None,
                            multiplicity: int, support_diameter: float):
        """Log a measured (r, eps)-variation certificate."""
        self._log("partition.certified", {
            "r": r,
            "eps": eps,
            "measured_variation": variation,
            "tent_width": width,
            "multiplicity": multiplicity,
            "support_diameter": support_diameter,
        })

    def dual_certified(self, lipschitz: float, halo: float, audited_ratio: float):
        """Log an audited Lipschitz dual family."""
        self._log("dual.certified", {
            "lipschitz_constant": lipschitz,
            "halo": halo,
            "audited_ratio": audited_ratio,
        })

    # Assemblies
    def assembly_bound(self, regime: str, sup_block_norm: float, measured: float):
        """Log a block-assembly norm check."""
        self._log("assembly.bound", {
            "regime": regime,
            "sup_block_norm": sup_block_norm,
            "measured_norm": measured,
        })

    def commutator_epsilon(self, details: dict[str, Any]):
        """Log the epsilon derivation of a commutator assembly."""
        self._log("commutator.epsilon", details)

    # Quasi-locality
    def quasilocal_certificate(self, eps: float, lipschitz: float, r: float, norm: float,
                               profile: int, modulus: float):
        """Log a uniform commutator certificate."""
        self._log("quasilocal.certificate", {
            "eps": eps,
            "lipschitz_constant": lipschitz,
            "propagation": r,
            "norm": norm,
            "geometry_profile": profile,
            "modulus": modulus,
        })

    # Limits and Fredholm analysis
    def limit_extracted(self, direction: str, tail: list[int], residual: float, rich: bool):
        """Log a limit-operator extraction."""
        self._log("limit.extracted", {
            "direction": direction,
            "tail": tail,
            "cauchy_residual": residual,
            "rich": rich,
        })

    def parametrix_built(self, details: dict[str, Any]):
        """Log parametrix metrics."""
        self._log("parametrix.built", details)

    def verdict_issued(self, verdict: str, caveats: int):
        """Log a Fredholm verdict."""
        self._log("verdict.issued", {"verdict": verdict, "caveats": caveats})



def _rotating_handler(
    path: Path, level: int, formatter: logging.Formatter, max_bytes: int, backup_count: int
) -> logging.Handler:
    handler = logging.handlers.RotatingFileHandler(
        path, maxBytes=max_bytes, backupCount=backup_count, encoding="utf-8"
    )
    handler.setLevel(level)
    handler.setFormatter(formatter)
    return handler


def setup_logging(
    app_name: str = "bdo_tool",
    log_level: str | None = None,
    log_dir: str | Path | None = None,
    json_format: bool = True,
    max_bytes: int = 10 * 1024 * 1024,
    backup_count: int = 5,
) -> tuple[logging.Logger, CertificateLogger]:
    """
    Attach handlers for an analysis run.

    Files under ``log_dir``:
        <app_name>.log               everything at ``log_level`` and above
        <app_name>_errors.log        ERROR and above, always JSON
        <app_name>_certificates.log  certificate events, always JSON, not propagated

    Console output goes to stderr so stdout carries only the report path.
    ``log_level`` and ``log_dir`` default to the active process config
    (``BDO_ENV``). Calling again replaces the handlers of a previous call.

    Returns:
        Tuple of (main logger, certificate logger)
    """
    settings = get_config()
    level_name = (log_level or settings.LOG_LEVEL).upper()
    level = getattr(logging, level_name, logging.INFO)
    log_dir = Path(log_dir) if log_dir is not None else Path(settings.LOG_DIR)
    log_dir.mkdir(parents=True, exist_ok=True)

    formatter: logging.Formatter = (
        JSONFormatter() if json_format else logging.Formatter(HUMAN_FORMAT, datefmt="%Y-%m-%d %H:%M:%S")
    )

    app_logger = logging.getLogger(app_name)
    app_logger.setLevel(level)
    app_logger.handlers.clear()

    console = logging.StreamHandler(sys.stderr)
    console.setLevel(level)
    console.setFormatter(formatter)
    app_logger.addHandler(console)
    app_logger.addHandler(_rotating_handler(log_dir / f"{app_name}.log", level, formatter, max_bytes, backup_count))
    app_logger.addHandler(
        _rotating_handler(log_dir / f"{app_name}_errors.log", logging.ERROR, JSONFormatter(), max_bytes, backup_count)
    )

    certificates = logging.getLogger(f"{app_name}.certificates")
    certificates.setLevel(logging.INFO)
    certificates.handlers.clear()
    certificates.propagate = False
    certificates.addHandler(
        _rotating_handler(
            log_dir / f"{app_name}_certificates.log", logging.INFO, JSONFormatter(), max_bytes, backup_count
        )
    )
    if settings is get_config("development"):
        echo = logging.StreamHandler(sys.stderr)
        echo.setFormatter(formatter)
        certificates.addHandler(echo)

    app_logger.debug(f"Logging to {log_dir} at {level_name}")
    return app_logger, CertificateLogger(certificates)


def get_logger(name: str = "bdo_tool") -> logging.Logger:
    return logging.getLogger(name)


def get_certificate_logger() -> CertificateLogger:
    """Certificate logger; silent until ``setup_logging`` has attached its file."""
    return CertificateLogger(logging.getLogger("bdo_tool.certificates"))
