"""Scoped loggers.

Every module binds its logger once at import time::

    campaign_log = logger.Campaign.logger()
    backend_log = logger.Backend.logger()

Records carry the scope in ``extra`` so a single handler can tell campaign
progress apart from backend traffic.
"""

from __future__ import annotations

import logging
from typing import Optional

FORMAT = "%(asctime)s %(levelname)-7s [%(scope)s] %(name)s: %(message)s"


class _Scope:
    name: str = "ttcompute"

    @classmethod
    def logger(cls, name: Optional[str] = None) -> logging.LoggerAdapter:
        """Return an adapter tagging records with this scope.

        Args:
            name: Logger name below ``ttcompute``. Defaults to the scope name.
        """
        base = logging.getLogger(f"ttcompute.{name or cls.name}")
        return logging.LoggerAdapter(base, {"scope": cls.name})


class Campaign(_Scope):
    """Campaign progress: seeds, steps, selections, exports."""

    name = "campaign"


class Backend(_Scope):
    """Policy and evaluator traffic, local or remote."""

    name = "backend"


def setup(level: str = "INFO") -> None:
    """Install one stream handler on the package root logger.

    Only the CLI calls this; library code never configures handlers.
    """
    root = logging.getLogger("ttcompute")
    if not any(getattr(h, "_ttcompute", False) for h in root.handlers):
        handler = logging.StreamHandler()
        handler.setFormatter(logging.Formatter(FORMAT))
        handler._ttcompute = True
        root.addHandler(handler)
    root.setLevel(level.upper())
