from concurrent.futures import ProcessPoolExecutor
from typing import Callable, Iterable, List, TypeVar

from tsb_monitor.core.logger import get_logger

logger = get_logger(__name__)

T = TypeVar("T")
R = TypeVar("R")


def ordered_map(fn: Callable[[T], R], items: Iterable[T], workers: int = 1) -> List[R]:
    """
    Apply fn to every item, fanning out over worker processes when workers > 1.

    Results come back in input order, so the worker count never changes the output.
    fn and the items must be picklable when workers > 1.
    """
    items = list(items)
    if workers <= 1 or len(items) <= 1:
        return [fn(item) for item in items]
    logger.debug("Fanning out", tasks=len(items), workers=workers)
    with ProcessPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(fn, items))
