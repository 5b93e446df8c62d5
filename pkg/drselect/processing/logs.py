"""Structured logging: one JSON object per event on stderr."""
import datetime
import json
import logging
import sys

from drselect.processing import config

# attributes every LogRecord has; anything else came in through ``extra=``
_RECORD_FIELDS = set(vars(logging.LogRecord(
    "", logging.INFO, "", 0, "", None, None))) | {"message", "asctime"}


class JsonFormatter(logging.Formatter):
    """Formats a record as ``{"ts", "level", "logger", "event", **extra}``."""

    def format(self, record):
        event = {
            "ts": datetime.datetime.fromtimestamp(
                record.created, tz=datetime.timezone.utc).isoformat(),
            "level": record.levelname,
            "logger": record.name,
            "event": record.getMessage(),
        }
        for key, value in vars(record).items():
            if key not in _RECORD_FIELDS and not key.startswith("_"):
                event[key] = value
        if record.exc_info:
            event["exception"] = self.formatException(record.exc_info)
        return json.dumps(event, default=str)


def configure_logging(level=config.log_level, stream=None):
    """Route all drselect loggers to a single JSON handler."""
    logger = logging.getLogger("drselect")
    for handler in list(logger.handlers):
        logger.removeHandler(handler)
    handler = logging.StreamHandler(stream or sys.stderr)
    handler.setFormatter(JsonFormatter())
    logger.addHandler(handler)
    logger.setLevel(level)
    return logger
