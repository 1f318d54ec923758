"""
Logging setup

All modules log through loguru's shared ``logger``. Rank threads bind a ``rank`` extra so
interleaved lines from concurrent ranks stay attributable.
"""
from __future__ import annotations
import sys
from pathlib import Path
from typing import Optional

from loguru import logger

from ..config import DEFAULT_LOG_LEVEL

LOG_FORMAT = (
    "{time:YYYY-MM-DD HH:mm:ss.SSS} | {level: <7} | rank={extra[rank]} | "
    "{name}:{function} - {message}"
)

# Records emitted outside a rank thread carry rank="-"
logger.configure(extra={"rank": "-"})


def setup_logging(level: Optional[str] = None, log_file: Optional[Path] = None) -> None:
    """
    Replace the default sink with a stderr sink and an optional file sink.

    Args:
        level: Minimum level name; defaults to CUBEFLOW_LOG_LEVEL
        log_file: Path of the run log (typically run/log.txt); parent directories are created
    """
    level = (level or DEFAULT_LOG_LEVEL).upper()
    logger.remove()
    logger.add(sys.stderr, level=level, format=LOG_FORMAT, enqueue=False)
    if log_file is not None:
        log_file = Path(log_file)
        log_file.parent.mkdir(parents=True, exist_ok=True)
        logger.add(str(log_file), level=level, format=LOG_FORMAT, mode="w", encoding="utf-8")


def rank_logger(rank: int):
    """Logger bound to a rank id"""
    return logger.bind(rank=rank)
