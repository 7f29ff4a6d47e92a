"""Structured logging configuration."""

import logging
import sys
from typing import Any, Dict

import structlog

from src.shared.config import get_settings

SERVICE_NAME = "prerankcal"


def setup_logging() -> None:
    """Configure structured logging for library and CLI use."""
    settings = get_settings()

    # Results go to stdout, so logs stay on stderr
    logging.basicConfig(
        format="%(message)s",
        stream=sys.stderr,
        level=getattr(logging, settings.log_level),
        force=True,
    )

    structlog.configure(
        processors=[
            structlog.contextvars.merge_contextvars,
            structlog.stdlib.add_log_level,
            structlog.stdlib.add_logger_name,
            structlog.processors.TimeStamper(fmt="iso"),
            add_service_context,
            # JSON formatting for production, pretty for development
            structlog.dev.ConsoleRenderer()
            if settings.debug
            else structlog.processors.JSONRenderer(),
        ],
        wrapper_class=structlog.stdlib.BoundLogger,
        logger_factory=structlog.stdlib.LoggerFactory(),
        cache_logger_on_first_use=True,
    )


def add_service_context(
    logger: Any, method_name: str, event_dict: Dict[str, Any]
) -> Dict[str, Any]:
    """Add service context to log entries."""
    event_dict.setdefault("service", SERVICE_NAME)
    return event_dict


def bind_run_context(**fields: Any) -> None:
    """Attach run-level fields (command, run directory) to every log record."""
    structlog.contextvars.clear_contextvars()
    structlog.contextvars.bind_contextvars(**fields)


def get_logger(name: str) -> structlog.stdlib.BoundLogger:
    """Get a structured logger instance."""
    return structlog.get_logger(name)
