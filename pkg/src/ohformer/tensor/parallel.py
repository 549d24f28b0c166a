"""
Worker pool for batch-parallel kernels.

Kernels split work by batch element only, so no floating-point reduction
ever crosses a split and results do not depend on the thread count.
"""

import logging
import os
from concurrent.futures import ThreadPoolExecutor
from typing import Callable, Iterable, List, Optional, TypeVar

logger = logging.getLogger(__name__)

T = TypeVar("T")
R = TypeVar("R")

THREADS_ENV = "OHF_THREADS"

_num_threads = 1
_executor: Optional[ThreadPoolExecutor] = None


def threads_from_env(default: int = 1) -> int:
    value = os.environ.get(THREADS_ENV)
    if not value:
        return default
    try:
        return max(1, int(value))
    except ValueError:
        logger.warning("ignoring non-integer %s=%r", THREADS_ENV, value)
        return default


def set_num_threads(n: int) -> None:
    """Resize the worker pool; ``1`` runs every kernel inline."""
    global _num_threads, _executor
    n = max(1, int(n))
    if n == _num_threads:
        return
    if _executor is not None:
        _executor.shutdown(wait=True)
        _executor = None
    _num_threads = n
    if n > 1:
        _executor = ThreadPoolExecutor(max_workers=n, thread_name_prefix="ohf")
    logger.debug("kernel threads set to %d", n)


def get_num_threads() -> int:
    return _num_threads


def parallel_map(fn: Callable[[T], R], items: Iterable[T]) -> List[R]:
    """Ordered map over ``items``, run on the pool when more than one thread is set."""
    items = list(items)
    if _executor is None or len(items) < 2:
        return [fn(item) for item in items]
    return list(_executor.map(fn, items))
