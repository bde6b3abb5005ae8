"""Small shared helpers."""

from __future__ import annotations

import os

from .errors import ConfigError


def worker_count() -> int:
    """Worker parallelism cap: IHVIT_THREADS if set, else logical cores."""
    raw = os.environ.get("IHVIT_THREADS")
    if raw is None:
        return os.cpu_count() or 1
    try:
        n = int(raw)
    except ValueError:
        raise ConfigError(f"IHVIT_THREADS must be an integer, got {raw!r}") from None
    if n < 1:
        raise ConfigError(f"IHVIT_THREADS must be >= 1, got {n}")
    return n
