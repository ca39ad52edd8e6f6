"""Worker and BLAS thread-count control.

``HILA_THREADS`` caps the number of image-level workers used during
evaluation. BLAS pools are pinned to one thread inside numeric loops: at
this package's tensor sizes pool synchronization costs more than it buys,
and a fixed thread count keeps reductions bitwise reproducible.
"""

from __future__ import annotations

import contextlib
import os


def worker_count() -> int:
    val = os.environ.get("HILA_THREADS", "1")
    try:
        return max(1, int(val))
    except ValueError:
        return 1


def single_thread_blas():
    """Context manager limiting BLAS pools to one thread (no-op without
    threadpoolctl)."""
    try:
        from threadpoolctl import threadpool_limits
    except ImportError:  # pragma: no cover
        return contextlib.nullcontext()
    return threadpool_limits(limits=1)
