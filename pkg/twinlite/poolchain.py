"""
Ordered multi-stage thread pools.

A :class:`PoolChain` pushes an iterable through a sequence of functions, each
stage running in its own thread pool, and yields results in input order. The
dataset reader uses it to decode files and preprocess samples concurrently:

.. highlight:: python
.. code-block:: python

    from twinlite.poolchain import PoolChain

    samples = (
        PoolChain()
        .add_threadpool(read_files, name="read")
        .add_threadpool(preprocess, name="preprocess")
    ).execute_eager(sample_ids)

Because every stage maps with :meth:`concurrent.futures.Executor.map`, output
order never depends on scheduling, so the result is the same as
:meth:`PoolChain.execute_single_threaded_eager` on the same input.
"""
import concurrent.futures
import logging
import typing

from twinlite.errors import TwinLiteValidationError

logger = logging.getLogger(__name__)


class _Stage(typing.NamedTuple):
    """One function of the chain and how to run it."""

    name: str
    function: typing.Callable
    max_workers: typing.Optional[int]
    timeout: typing.Optional[float]


class PoolChain:
    """A chain of thread-pool stages."""

    def __init__(self):
        """Create an empty chain."""
        self.stages: typing.List[_Stage] = []

    def add_threadpool(
        self,
        function: typing.Callable,
        *,
        name: typing.Optional[str] = None,
        max_workers: typing.Optional[int] = None,
        timeout: typing.Optional[float] = None,
    ) -> "PoolChain":
        """
        Append a stage.

        Args:
            function: Called once per item with the previous stage's result.
            name: Label used in log messages. Defaults to the function name.
            max_workers: Threads for this stage. None picks the executor default.
            timeout: Seconds to wait for any one result before
                :class:`concurrent.futures.TimeoutError` is raised.

        Returns:
            The chain itself, for further ``add_threadpool`` calls.

        Raises:
            TwinLiteValidationError: On a non-callable function or a
                non-positive worker count or timeout.
        """
        if not callable(function):
            raise TwinLiteValidationError("every poolchain stage needs a callable")
        if max_workers is not None and (not isinstance(max_workers, int) or max_workers < 1):
            raise TwinLiteValidationError(
                f"max_workers must be a positive int or None, got {max_workers!r}"
            )
        if timeout is not None and timeout <= 0:
            raise TwinLiteValidationError(f"timeout must be positive or None, got {timeout!r}")
        self.stages.append(
            _Stage(
                name=name or getattr(function, "__name__", "stage"),
                function=function,
                max_workers=max_workers,
                timeout=timeout,
            )
        )
        return self

    def _require_stages(self):
        if not self.stages:
            raise TwinLiteValidationError("add at least one stage before executing")

    def execute_lazy(self, iterable: typing.Iterable[typing.Any]) -> typing.Iterator[typing.Any]:
        """
        Run the chain over `iterable` and yield results in input order.

        The pools are shut down when the iterator is exhausted or closed.
        """
        self._require_stages()
        logger.debug("poolchain stages: %s", [stage.name for stage in self.stages])
        executors = []
        current = iterable
        try:
            for stage in self.stages:
                executor = concurrent.futures.ThreadPoolExecutor(max_workers=stage.max_workers)
                executors.append(executor)
                current = executor.map(stage.function, current, timeout=stage.timeout)
            yield from current
        finally:
            for executor in executors:
                executor.shutdown(wait=True)

    def execute_eager(self, iterable: typing.Iterable[typing.Any]) -> typing.List[typing.Any]:
        """Run the chain and collect every result into a list."""
        return list(self.execute_lazy(iterable))

    def execute_single_threaded_lazy(
        self, iterable: typing.Iterable[typing.Any]
    ) -> typing.Iterator[typing.Any]:
        """Run the chain in the calling thread. Useful for debugging a stage."""
        self._require_stages()
        for item in iterable:
            for stage in self.stages:
                item = stage.function(item)
            yield item

    def execute_single_threaded_eager(
        self, iterable: typing.Iterable[typing.Any]
    ) -> typing.List[typing.Any]:
        """Single-threaded :meth:`execute_eager`."""
        return list(self.execute_single_threaded_lazy(iterable))
