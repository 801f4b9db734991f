"""
app/core/logging.py - Logging Setup

Configures the loguru logger once per process and provides a small stage
timer used by every pipeline step. Stage timings end up in the run manifest.

Usage:
    from app.core.logging import configure_logging, stage

    configure_logging()
    timings = {}
    with stage("mesh", timings):
        ...
    # logs: stage=mesh elapsed=1.234s
"""

import sys
import time
from contextlib import contextmanager
from typing import Iterator

from loguru import logger

from app.core.config import settings


def configure_logging(level: str | None = None, json_lines: bool | None = None) -> None:
    """
    Replace loguru's default handler with a single stderr sink.

    Args:
        level: Level name; defaults to settings.log_level
        json_lines: Serialize records as JSON; defaults to settings.log_json
    """
    logger.remove()
    logger.add(
        sys.stderr,
        level=level or settings.log_level,
        serialize=settings.log_json if json_lines is None else json_lines,
        format="<green>{time:HH:mm:ss}</green> | <level>{level: <7}</level> | {message}",
    )


@contextmanager
def stage(name: str, timings: dict[str, float] | None = None) -> Iterator[None]:
    """
    Time a pipeline stage and log its duration.

    Repeated stages with the same name accumulate into one timing entry.
    """
    start = time.perf_counter()
    try:
        yield
    finally:
        elapsed = time.perf_counter() - start
        if timings is not None:
            timings[name] = timings.get(name, 0.0) + elapsed
        logger.info(f"stage={name} elapsed={elapsed:.3f}s")
