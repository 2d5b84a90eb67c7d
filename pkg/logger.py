"""
Loguru setup shared by the library and the CLI stages.

Everything goes to stderr: stage results are files and colorama status lines,
so stdout carries nothing the logger needs to share. LOG_FORMAT=json switches
the console sink to serialized records; LOG_FILE (or production) adds a file.
"""

import sys
from pathlib import Path

from loguru import logger

from config import get_settings

settings = get_settings()

PRETTY_FORMAT = (
    "<green>{time:YYYY-MM-DD HH:mm:ss}</green> | <level>{level: <8}</level> | "
    "<cyan>{name}</cyan>:<cyan>{function}</cyan> - <level>{message}</level>"
)
RUN_LOG_FORMAT = (
    "{time:YYYY-MM-DD HH:mm:ss} | {level: <8} | {name}:{function} - {message}"
)


def _console_sink_options() -> dict:
    if settings.log_format == "json":
        return {"serialize": True, "diagnose": False}
    return {"format": PRETTY_FORMAT, "colorize": True, "diagnose": settings.debug}


def setup_logging():
    """Install the console sink and, when configured, a persistent file sink"""
    logger.remove()
    logger.add(
        sys.stderr,
        level=settings.log_level,
        backtrace=True,
        **_console_sink_options(),
    )

    if settings.log_file:
        logger.add(settings.log_file, level=settings.log_level, serialize=True)
    elif settings.environment == "production":
        logger.add(
            "logs/plink_{time:YYYY-MM-DD}.log",
            rotation="00:00",
            retention="30 days",
            compression="zip",
            level=settings.log_level,
            serialize=True,
        )

    logger.debug(
        f"Logging configured for {settings.environment} ({settings.log_format})"
    )
    return logger


def add_run_log(out_dir: Path) -> int:
    """Mirror records into <out_dir>/stage.log; returns the handler id for removal."""
    return logger.add(
        Path(out_dir) / "stage.log",
        level=settings.log_level,
        format=RUN_LOG_FORMAT,
        mode="w",
        encoding="utf-8",
    )


app_logger = setup_logging()
