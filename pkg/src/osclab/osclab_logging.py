# SPDX-License-Identifier: GPL-3.0-or-later
import logging.config
import os

from osclab.yaml import load_document

DEFAULT_LOGGING_CONFIG = {
    "version": 1,
    "disable_existing_loggers": False,
    "loggers": {
        "osclab": {
            "level": "INFO",
        },
        # Skip printing tracebacks on frequent tracing connection issues
        "opentelemetry.sdk.trace.export": {
            "level": "CRITICAL",
        },
    },
    "handlers": {
        "console": {
            "formatter": "bare",
            "class": "logging.StreamHandler",
            # stdout is reserved for schemas and reports
            "stream": "ext://sys.stderr",
            "level": "DEBUG",
        },
    },
    "formatters": {
        "bare": {
            "format": "[%(asctime)s] [%(process)d] [%(levelname)s] %(name)s: %(message)s",
            "datefmt": "%Y-%m-%d %H:%M:%S",
        }
    },
    "root": {
        "level": "WARNING",
        "handlers": ["console"],
    },
}


def init_logging(level: str | None = None):
    """
    Applies the dictConfig from the JSON or YAML file named by
    OSCLAB_LOGGING_CONFIG, or the default one. A given ``level`` replaces the
    level of the "osclab" logger.
    """
    config = DEFAULT_LOGGING_CONFIG

    path = os.getenv("OSCLAB_LOGGING_CONFIG")
    if path:
        config = load_document(path)

    if level is not None:
        loggers = config.get("loggers", {})
        osclab = {**loggers.get("osclab", {}), "level": level}
        config = {**config, "loggers": {**loggers, "osclab": osclab}}

    logging.config.dictConfig(config)
