"""Process-wide thread and determinism settings."""

from __future__ import annotations

import os
from contextlib import contextmanager
from typing import Optional

from .errors import ConfigError

THREADS_ENV = "DETAILNET_THREADS"

try:
    from threadpoolctl import threadpool_limits
except ImportError:  # optional; without it the BLAS default applies
    threadpool_limits = None

_limiter = None


def thread_cap(environ=None) -> Optional[int]:
    """Worker cap from ``DETAILNET_THREADS``, or None when unset."""
    raw = (environ if environ is not None else os.environ).get(THREADS_ENV, "").strip()
    if not raw:
        return None
    try:
        n = int(raw)
    except ValueError:
        raise ConfigError(f"{THREADS_ENV} must be a positive integer, got {raw!r}") from None
    if n < 1:
        raise ConfigError(f"{THREADS_ENV} must be a positive integer, got {n}")
    return n


def configure(deterministic: bool = False, environ=None) -> Optional[int]:
    """Apply the thread cap; deterministic mode pins BLAS to one thread.

    Multi-threaded GEMM may split reductions differently between runs, so
    bitwise reproducibility is only promised with a single BLAS thread.
    Returns the effective cap (None means library default).
    """
    global _limiter
    cap = thread_cap(environ)
    if deterministic:
        cap = 1
    if cap is not None and threadpool_limits is not None:
        _limiter = threadpool_limits(limits=cap)
    return cap


@contextmanager
def limited_threads(n: int):
    if threadpool_limits is None:
        yield
        return
    with threadpool_limits(limits=n):
        yield
