"""Central logging configuration.

Applied once at CLI startup. Every module uses `logger = logging.getLogger(__name__)`
and inherits this config. Level is controlled by LOG_LEVEL env var (default INFO).

Format includes a run_id field taken from a context variable that each CLI
command sets to a short hex id, otherwise '-'. This lets you filter one
command's logs out of a shared log file.
"""

from __future__ import annotations

import contextvars
import logging
import os
import sys
import uuid

current_run_id: contextvars.ContextVar[str] = contextvars.ContextVar(
    "current_run_id", default="-"
)


class RunIdFilter(logging.Filter):
    """Inject the current run_id into every LogRecord."""

    def filter(self, record: logging.LogRecord) -> bool:
        record.run_id = current_run_id.get()
        return True


def new_run_id() -> str:
    """Set and return a fresh short run id for the current context."""
    run_id = uuid.uuid4().hex[:8]
    current_run_id.set(run_id)
    return run_id


_CONFIGURED = False


def configure_logging() -> None:
    """Install root logging config. Safe to call more than once."""
    global _CONFIGURED
    if _CONFIGURED:
        return

    level_name = os.environ.get("LOG_LEVEL", "INFO").upper()
    level = getattr(logging, level_name, logging.INFO)

    handler = logging.StreamHandler(sys.stderr)
    handler.setFormatter(
        logging.Formatter(
            fmt="%(asctime)s [%(levelname)s] [%(run_id)s] %(name)s: %(message)s",
            datefmt="%Y-%m-%d %H:%M:%S",
        )
    )
    handler.addFilter(RunIdFilter())

    root = logging.getLogger()
    root.setLevel(level)
    for existing in list(root.handlers):
        root.removeHandler(existing)
    root.addHandler(handler)

    _CONFIGURED = True
