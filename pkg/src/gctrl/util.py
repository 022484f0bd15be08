"""Small shared helpers."""

from __future__ import annotations

import os

from .errors import ConfigError

THREADS_ENV = "GCTRL_THREADS"


def worker_count() -> int:
    """Worker cap from the GCTRL_THREADS environment variable (0 = auto)."""
    raw = os.environ.get(THREADS_ENV, "").strip()
    if not raw:
        return 1
    try:
        n = int(raw)
    except ValueError as exc:
        raise ConfigError(f"{THREADS_ENV} must be an integer, got {raw!r}") from exc
    if n < 0:
        raise ConfigError(f"{THREADS_ENV} must be >= 0, got {n}")
    if n == 0:
        return os.cpu_count() or 1
    return n
