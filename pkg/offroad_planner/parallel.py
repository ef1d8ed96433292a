"""
Order-preserving thread pool map, capped by PLANNER_THREADS.
"""

import concurrent.futures
import logging
from typing import Callable, List, Optional, Sequence, TypeVar

from offroad_planner.config import planner_threads

logger = logging.getLogger(__name__)

T = TypeVar("T")
R = TypeVar("R")


def map_ordered(fn: Callable[[T], R], items: Sequence[T], max_workers: Optional[int] = None) -> List[R]:
    """
    Apply fn to every item, possibly concurrently, returning results in input order.

    Args:
        fn: Function safe for concurrent invocation
        items: Inputs
        max_workers: Worker cap (defaults to PLANNER_THREADS)

    Returns:
        List of results aligned with items
    """
    workers = min(max_workers or planner_threads(), len(items))
    if workers <= 1:
        return [fn(item) for item in items]

    with concurrent.futures.ThreadPoolExecutor(max_workers=workers) as executor:
        futures = [executor.submit(fn, item) for item in items]
        return [f.result() for f in futures]
