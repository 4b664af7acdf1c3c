"""Process configuration for bdo-tool."""

import os
from pathlib import Path


class Config:
    """Base configuration."""

    BASE_DIR = Path(__file__).parent.parent
    APP_VERSION = os.environ.get("APP_VERSION", "1.0.0")

    # Output
    REPORT_DIR = Path(os.environ.get("REPORT_DIR", BASE_DIR / "reports"))
    REPORT_SIGNIFICANT_DIGITS = int(os.environ.get("REPORT_SIGNIFICANT_DIGITS", "12"))

    # Reproducibility / parallelism
    DEFAULT_SEED = int(os.environ.get("DEFAULT_SEED", "0"))
    DEFAULT_THREADS = int(os.environ.get("DEFAULT_THREADS", "1"))

    # Numerical tolerances
    RICHNESS_TOL = float(os.environ.get("RICHNESS_TOL", "1e-6"))
    RESIDUAL_TOL = float(os.environ.get("RESIDUAL_TOL", "1e-6"))
    NEUMANN_TOL = float(os.environ.get("NEUMANN_TOL", "1e-12"))
    IDENTITY_TOL = float(os.environ.get("IDENTITY_TOL", "1e-9"))
    INVERSE_NORM_TOL = float(os.environ.get("INVERSE_NORM_TOL", "1e-6"))

    # Method limits
    P1_EXACT_LIMIT = int(os.environ.get("P1_EXACT_LIMIT", "16"))
    SYMBOL_GRID_POINTS = int(os.environ.get("SYMBOL_GRID_POINTS", str(2**14)))

    # Logging configuration
    LOG_LEVEL = os.environ.get("LOG_LEVEL", "INFO")
    LOG_DIR = Path(os.environ.get("LOG_DIR", BASE_DIR / "logs"))
    LOG_JSON_FORMAT = os.environ.get("LOG_JSON_FORMAT", "True").lower() == "true"
    LOG_MAX_BYTES = int(os.environ.get("LOG_MAX_BYTES", 10 * 1024 * 1024))  # 10MB
    LOG_BACKUP_COUNT = int(os.environ.get("LOG_BACKUP_COUNT", 5))


class DevelopmentConfig(Config):
    """Development configuration."""

    LOG_LEVEL = os.environ.get("LOG_LEVEL", "DEBUG")
    LOG_JSON_FORMAT = os.environ.get("LOG_JSON_FORMAT", "False").lower() == "true"


class ProductionConfig(Config):
    """Batch runs on shared machines."""

    LOG_LEVEL = os.environ.get("LOG_LEVEL", "INFO")
    LOG_JSON_FORMAT = True


class TestingConfig(Config):
    """Testing configuration."""

    LOG_LEVEL = "WARNING"
    DEFAULT_THREADS = 1
    LOG_JSON_FORMAT = False


config = {
    "development": DevelopmentConfig,
    "production": ProductionConfig,
    "testing": TestingConfig,
    "default": Config,
}


def get_config(name: str | None = None) -> type[Config]:
    """Resolve a config class from a name or the BDO_ENV variable."""
    name = name or os.environ.get("BDO_ENV", "default")
    return config.get(name, Config)
