"""Logging configuration."""
import json
import logging
import sys
from contextlib import contextmanager
from contextvars import ContextVar
from datetime import datetime, timezone
from typing import Iterator, Optional

from app.config import settings

_worker: ContextVar[Optional[int]] = ContextVar("opp_worker", default=None)


@contextmanager
def bind_worker(worker: int) -> Iterator[None]:
    """Tag every record logged by this thread with the worker index."""
    token = _worker.set(worker)
    try:
        yield
    finally:
        _worker.reset(token)


class EngineContextFilter(logging.Filter):
    """Adds ``worker`` and ``stage`` attributes (``None`` when not in scope)."""

    def filter(self, record: logging.LogRecord) -> bool:
        if getattr(record, "worker", None) is None:
            record.worker = _worker.get()
        if not hasattr(record, "stage"):
            record.stage = None
        return True


class JSONFormatter(logging.Formatter):
    """JSON log formatter."""

    def format(self, record: logging.LogRecord) -> str:
        """Format log record as JSON."""
        log_data = {
            'timestamp': datetime.now(timezone.utc).isoformat(),
            'level': record.levelname,
            'logger': record.name,
            'message': record.getMessage(),
            'module': record.module,
            'function': record.funcName,
            'line': record.lineno
        }
        for attr in ('worker', 'stage'):
            value = getattr(record, attr, None)
            if value is not None:
                log_data[attr] = value

        if record.exc_info:
            log_data['exception'] = self.formatException(record.exc_info)

        return json.dumps(log_data)


class TextFormatter(logging.Formatter):
    """Plain format with a ``[w<worker> s<stage>]`` tag when either is known."""

    def __init__(self) -> None:
        super().__init__('%(asctime)s - %(name)s - %(levelname)s - %(message)s')

    def format(self, record: logging.LogRecord) -> str:
        text = super().format(record)
        tags = []
        if getattr(record, 'worker', None) is not None:
            tags.append(f"w{record.worker}")
        if getattr(record, 'stage', None) is not None:
            tags.append(f"s{record.stage}")
        return f"{text} [{' '.join(tags)}]" if tags else text


def setup_logging(level: Optional[str] = None) -> None:
    """Configure application logging.

    Safe to call more than once: the handler installed by a previous call is
    replaced rather than duplicated.
    """
    log_level = getattr(logging, (level or settings.log_level).upper(), logging.INFO)

    handler = logging.StreamHandler(sys.stderr)
    handler.set_name("oppswitch")
    handler.addFilter(EngineContextFilter())

    if settings.log_format.lower() == 'json':
        handler.setFormatter(JSONFormatter())
    else:
        handler.setFormatter(TextFormatter())

    root_logger = logging.getLogger()
    root_logger.setLevel(log_level)
    root_logger.handlers = [h for h in root_logger.handlers if h.get_name() != "oppswitch"]
    root_logger.addHandler(handler)

    # Set uvicorn loggers to use same config
    for logger_name in ['uvicorn', 'uvicorn.access', 'uvicorn.error']:
        logger = logging.getLogger(logger_name)
        logger.handlers = []
        logger.addHandler(handler)
        logger.setLevel(log_level)
        logger.propagate = False
