from typing import Callable, Iterable, List, TypeVar

from joblib import Parallel, delayed

T = TypeVar('T')
R = TypeVar('R')


def ordered_map(fn: Callable[[T], R], items: Iterable[T], threads: int = 1) -> List[R]:
    """Apply fn to every item and return results in input order.

    Callers reduce the returned list themselves, left to right, so the
    outcome does not depend on the number of threads.
    """
    items = list(items)
    if threads <= 1 or len(items) <= 1:
        return [fn(item) for item in items]
    return Parallel(n_jobs=threads, prefer='threads')(delayed(fn)(item) for item in items)
