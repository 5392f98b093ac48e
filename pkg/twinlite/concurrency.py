"""Running functions in background threads, and prefetching their results in order."""
import collections
import concurrent.futures
import functools
import typing

from twinlite.errors import TwinLiteValidationError

T = typing.TypeVar("T")
R = typing.TypeVar("R")


def run_in_background_thread(
    func: typing.Callable,
    *,
    max_workers: typing.Optional[int] = None,
):
    """
    Wrap `func` so that every call runs in a background thread.

    Args:
        func: The function to run in the background.
        max_workers: Maximum number of threads running `func` at once. None
            picks the executor default.

    Returns:
        A wrapper that takes the same arguments as `func` and returns a
        :class:`concurrent.futures.Future`. The wrapper exposes its thread
        pool as ``.executor`` so callers can shut it down.

    Raises:
        TwinLiteValidationError: If `func` is not callable.
    """
    if not callable(func):
        raise TwinLiteValidationError(
            "run_in_background_thread needs a callable as its first argument"
        )
    executor = concurrent.futures.ThreadPoolExecutor(max_workers=max_workers)

    @functools.wraps(func)
    def wrapper(*args, **kwargs):
        return executor.submit(func, *args, **kwargs)

    wrapper.executor = executor  # type: ignore
    return wrapper


def prefetch(
    func: typing.Callable[[T], R],
    items: typing.Iterable[T],
    *,
    depth: int = 2,
) -> typing.Iterator[R]:
    """
    Yield ``func(item)`` for every item, in order, computing up to `depth`
    results ahead in a background thread.

    .. highlight:: python
    .. code-block:: python

        for batch in prefetch(load_batch, batch_indices):
            train_step(batch)

    Exceptions raised by `func` surface when the failing result is reached.
    """
    if depth < 1:
        raise TwinLiteValidationError(f"prefetch depth must be >= 1, got {depth}")
    background = run_in_background_thread(func, max_workers=1)
    pending: typing.Deque[concurrent.futures.Future] = collections.deque()
    try:
        for item in items:
            pending.append(background(item))
            if len(pending) > depth:
                yield pending.popleft().result()
        while pending:
            yield pending.popleft().result()
    finally:
        for future in pending:
            future.cancel()
        background.executor.shutdown(wait=True)
