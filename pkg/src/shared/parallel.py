"""
Deterministic fan-out over index ranges.

Work is split into chunks whose boundaries depend only on the item count and the
chunk size, never on the number of workers, and results are merged by chunk
index. Any thread count therefore yields identical output.
"""
from typing import Callable, List, TypeVar

from joblib import Parallel, delayed

from src.shared.config import resolve_threads

T = TypeVar("T")


def chunk_bounds(n_items: int, chunk_size: int) -> List[range]:
    """Split ``range(n_items)`` into consecutive ranges of at most ``chunk_size``."""
    if chunk_size < 1:
        raise ValueError("chunk_size must be positive")
    return [
        range(start, min(start + chunk_size, n_items))
        for start in range(0, n_items, chunk_size)
    ]


def run_chunks(
    fn: Callable[[int, range], T],
    n_items: int,
    chunk_size: int,
    threads: int | None = None,
) -> List[T]:
    """
    Apply ``fn(chunk_index, index_range)`` to every chunk.

    Args:
        fn: Pure function of the chunk index and its item range
        n_items: Total number of items
        chunk_size: Items per chunk
        threads: Worker threads; resolved from settings when None

    Returns:
        Results ordered by chunk index
    """
    chunks = chunk_bounds(n_items, chunk_size)
    n_jobs = min(resolve_threads(threads), max(len(chunks), 1))
    if n_jobs <= 1 or len(chunks) <= 1:
        return [fn(i, chunk) for i, chunk in enumerate(chunks)]
    return list(
        Parallel(n_jobs=n_jobs, prefer="threads")(
            delayed(fn)(i, chunk) for i, chunk in enumerate(chunks)
        )
    )
