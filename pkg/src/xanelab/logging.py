"""JSON logging shared by the CLI and the long-running jobs (synthesis, training, embedding)."""

import json
import logging
import sys
import threading
from datetime import datetime, timezone
from pathlib import Path
from typing import Any, Dict, Optional, TextIO

import numpy as np
import psutil


def _json_default(value: Any) -> Any:
    """Context values are often numpy scalars or paths; everything else falls back to ``str``."""
    if isinstance(value, np.generic):
        return value.item()
    if isinstance(value, np.ndarray):
        return value.tolist()
    if isinstance(value, Path):
        return str(value)
    return str(value)


class JsonFormatter(logging.Formatter):
    """
    One JSON object per log line.

    Keys: ``timestamp`` (UTC, ISO 8601 with milliseconds), ``level``, ``message``, ``logger``,
    ``thread`` for records emitted from worker threads, ``error``/``error_type`` when an exception
    is attached, and ``extra_fields`` from :func:`log_with_context`.
    """

    def format(self, record: logging.LogRecord) -> str:
        created = datetime.fromtimestamp(record.created, tz=timezone.utc)
        log_obj: Dict[str, Any] = {
            "timestamp": created.isoformat(timespec="milliseconds"),
            "level": record.levelname,
            "message": record.getMessage(),
            "logger": record.name,
        }
        if record.threadName and record.threadName != threading.main_thread().name:
            log_obj["thread"] = record.threadName

        if record.exc_info:
            log_obj["error"] = self.formatException(record.exc_info)
            log_obj["error_type"] = record.exc_info[0].__name__ if record.exc_info[0] else None

        if hasattr(record, "extra_fields"):
            log_obj["extra_fields"] = record.extra_fields

        return json.dumps(log_obj, default=_json_default)


def setup_logging(logger_name: str = "xanelab", level: str = "INFO", stream: Optional[TextIO] = None) -> logging.Logger:
    """
    Configure JSON logging for the package.

    Library modules log through ``logging.getLogger(__name__)`` children of this logger,
    so one call here configures every module. Calling again only updates the level.

    Args:
        logger_name: Name of the logger
        level: Logging level (DEBUG, INFO, WARNING, ERROR, CRITICAL)
        stream: Destination, stdout by default

    Returns:
        Configured logger instance
    """
    logger = logging.getLogger(logger_name)
    logger.setLevel(getattr(logging, level.upper()))

    if not logger.handlers:
        handler = logging.StreamHandler(stream or sys.stdout)
        handler.setFormatter(JsonFormatter())
        logger.addHandler(handler)

    return logger


def log_with_context(logger: logging.Logger, level: str, message: str, extra: Optional[Dict[str, Any]] = None) -> None:
    """
    Log ``message`` with structured context under ``extra_fields``.

    Args:
        logger: Logger instance
        level: Log level name (debug, info, warning, error)
        message: Log message
        extra: Context fields; numpy values and paths are serialized as plain JSON
    """
    log_method = getattr(logger, level.lower())
    log_method(message, extra={"extra_fields": extra or {}}, stacklevel=2)


def get_memory_usage_mb() -> float:
    """Resident set size of this process in MB."""
    return psutil.Process().memory_info().rss / 1024 / 1024
