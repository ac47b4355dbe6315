import logging
import sys
from logging.config import dictConfig
from typing import Any

from .config import PLACEDROP_DEBUG_MODE


package_logger = logging.getLogger("placedrop")


def logging_config_defaults() -> Any:
    """Get default logging configuration

    Progress lines name the worker thread and module they come from since parallel
    runs interleave on one stream.
    """
    return {
        "version": 1,
        "disable_existing_loggers": False,
        "loggers": {
            "placedrop": {
                "level": "DEBUG" if PLACEDROP_DEBUG_MODE.current else "INFO",
                "handlers": ["run_progress"],
            },
        },
        "handlers": {
            "run_progress": {
                "class": "logging.StreamHandler",
                "formatter": "worker",
                "stream": sys.stdout,
            }
        },
        "formatters": {
            "worker": {
                "format": "%(asctime)s | %(threadName)s | %(name)s | %(levelname)s | %(message)s",
                "datefmt": r"%Y-%m-%dT%H:%M:%S%z",
                "class": "logging.Formatter",
            }
        },
    }


dictConfig(logging_config_defaults())


if PLACEDROP_DEBUG_MODE.current:
    package_logger.debug("placedrop is in debug mode")
