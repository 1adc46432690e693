"""Structured logging setup shared by the CLI and the trainers."""

import os
import sys
from typing import Optional

from loguru import logger


def configure_logging(level: Optional[str] = None, serialize: bool = True) -> None:
    """
    Route all log records to stderr as line-delimited JSON.

    Args:
        level: Minimum level; defaults to GINA_LOG_LEVEL or INFO
        serialize: Emit JSON records instead of formatted text
    """
    level = (level or os.getenv("GINA_LOG_LEVEL", "INFO")).upper()
    logger.remove()
    logger.add(sys.stderr, level=level, serialize=serialize)


def get_num_workers() -> int:
    """
    Upper bound on worker threads, read from GINA_NUM_WORKERS.

    Returns:
        Positive worker count
    """
    raw = os.getenv("GINA_NUM_WORKERS")
    if raw:
        try:
            return max(1, int(raw))
        except ValueError:
            logger.warning("Ignoring non-integer GINA_NUM_WORKERS={}", raw)
    return max(1, min(8, os.cpu_count() or 1))
