#!/usr/bin/env python3
"""
Run the analyses described by a JSON config and write the report.

Usage:
    python -m cli.analyze configs/decaying_diagonal.json
    python src/cli/analyze.py configs/tridiagonal.json --out reports/ --seed 7 --threads 4

Exit codes: 0 ran (failed analyses are recorded in the report), 2 config
error, 3 a checked identity or bound failed.
"""

import sys
from pathlib import Path

# Add src to path for imports
sys.path.insert(0, str(Path(__file__).parent.parent))

import click
from dotenv import load_dotenv

from config import get_config
from errors import ConfigError, InvariantViolation
from logging_config import setup_logging
from services.config_schema import load_config
from services.report_service import run

EXIT_CONFIG = 2
EXIT_INVARIANT = 3


@click.command()
@click.argument("config_path", type=click.Path(exists=True, dir_okay=False, path_type=Path))
@click.option(
    "--out",
    "out_dir",
    type=click.Path(file_okay=False, path_type=Path),
    default=None,
    help="Output directory (default: output.dir from the config, else REPORT_DIR)",
)
@click.option("--seed", type=int, default=None, help="Seed for randomized estimates (default: from the config)")
@click.option("--threads", type=click.IntRange(min=1), default=None, help="Worker threads (default: from the config)")
def analyze(config_path: Path, out_dir: Path | None, seed: int | None, threads: int | None) -> None:
    """Analyze the band operator described by CONFIG_PATH."""
    load_dotenv()
    settings = get_config()
    logger, _ = setup_logging(
        log_level=settings.LOG_LEVEL,
        log_dir=settings.LOG_DIR,
        json_format=settings.LOG_JSON_FORMAT,
        max_bytes=settings.LOG_MAX_BYTES,
        backup_count=settings.LOG_BACKUP_COUNT,
    )

    try:
        cfg = load_config(config_path)
        result = run(cfg, out_dir=out_dir, seed=seed, threads=threads, base_dir=config_path.parent)
    except ConfigError as e:
        click.echo(f"Invalid config {config_path}:", err=True)
        for violation in e.violations:
            click.echo(f"  - {violation}", err=True)
        raise SystemExit(EXIT_CONFIG)
    except InvariantViolation as e:
        logger.error(f"Invariant violation: {e}")
        click.echo(f"Invariant violation: {e}", err=True)
        raise SystemExit(EXIT_INVARIANT)

    click.echo(str(result.report_path))
    for failure in result.failures:
        click.echo(f"{failure['analysis']} failed: {failure['error']}: {failure['message']}", err=True)
    if result.invariant_violated:
        raise SystemExit(EXIT_INVARIANT)


if __name__ == "__main__":
    analyze()
