"""
Logging configuration for the model-free bounds solver.

Every event carries the run context bound by the command-line front end
(command name, root seed) so that parallel case/strike jobs can be told apart
in one log stream.
"""
import contextvars
import logging
import sys
from concurrent.futures import Executor, Future
from typing import Any, Callable

import structlog
from app.core.config import settings


def setup_logging(level: str | None = None, log_format: str | None = None) -> None:
    """Configure structlog and the standard library logging bridge."""
    level = (level or settings.log_level).upper()
    log_format = log_format or settings.log_format

    structlog.configure(
        processors=[
            structlog.contextvars.merge_contextvars,
            structlog.stdlib.filter_by_level,
            structlog.stdlib.add_logger_name,
            structlog.stdlib.add_log_level,
            structlog.stdlib.PositionalArgumentsFormatter(),
            structlog.processors.TimeStamper(fmt="iso"),
            structlog.processors.StackInfoRenderer(),
            structlog.processors.format_exc_info,
            structlog.processors.UnicodeDecoder(),
            structlog.processors.JSONRenderer() if log_format == "json" else structlog.dev.ConsoleRenderer(),
        ],
        context_class=dict,
        logger_factory=structlog.stdlib.LoggerFactory(),
        wrapper_class=structlog.stdlib.BoundLogger,
        cache_logger_on_first_use=True,
    )

    logging.basicConfig(
        format="%(message)s",
        stream=sys.stdout,
        level=getattr(logging, level),
    )
    logging.getLogger().setLevel(getattr(logging, level))


def bind_run_context(**values: Any) -> None:
    """Attach key-value pairs to every subsequent event of this context."""
    structlog.contextvars.bind_contextvars(**values)


def clear_run_context() -> None:
    """Drop the bound run context."""
    structlog.contextvars.clear_contextvars()


def submit_with_context(executor: Executor, fn: Callable[..., Any], *args: Any) -> Future:
    """Submit ``fn`` to a worker pool under a copy of the caller's run context."""
    return executor.submit(contextvars.copy_context().run, fn, *args)


def get_logger(name: str) -> structlog.stdlib.BoundLogger:
    """Get a structured logger instance."""
    return structlog.get_logger(name)


# Initialize logging on module import
setup_logging()
