"""
Tests for the :mod:`twinlite.concurrency` module.
"""
import threading
import time
import unittest

from twinlite.concurrency import prefetch, run_in_background_thread
from twinlite.errors import TwinLiteValidationError


def demo_func(value):
    """A test function to run in the background."""
    return value


def slow_square(value):
    """Finish early inputs last so that ordering is not an accident of timing."""
    time.sleep(0.01 * (5 - value))
    return value * value


class TestBackgroundThread(unittest.TestCase):
    """Unit tests for run_in_background_thread."""

    def test_run_in_background(self):
        """Test that we can make a function backgroundable."""
        backgroundable = run_in_background_thread(demo_func)
        try:
            assert backgroundable.executor
            future_3 = backgroundable(3)
            future_5 = backgroundable(5)
            assert 5 == future_5.result()
            assert 3 == future_3.result()
        finally:
            backgroundable.executor.shutdown()

    def test_runs_off_the_calling_thread(self):
        """Test that the wrapped function runs on a worker thread."""
        backgroundable = run_in_background_thread(threading.get_ident)
        try:
            assert backgroundable().result() != threading.get_ident()
        finally:
            backgroundable.executor.shutdown()

    def test_needs_a_callable(self):
        """Test that only callables can be wrapped."""
        with self.assertRaises(TwinLiteValidationError):
            run_in_background_thread(42)


class TestPrefetch(unittest.TestCase):
    """Unit tests for prefetch."""

    def test_keeps_input_order(self):
        """Test that results come back in input order."""
        assert list(prefetch(slow_square, range(5), depth=3)) == [0, 1, 4, 9, 16]

    def test_empty_input(self):
        """Test that an empty input yields nothing."""
        assert not list(prefetch(demo_func, []))

    def test_exception_surfaces_at_its_item(self):
        """Test that a worker exception is raised when its item is reached."""
        def fail_on_two(value):
            if value == 2:
                raise ValueError("two")
            return value

        results = prefetch(fail_on_two, range(5))
        assert next(results) == 0
        assert next(results) == 1
        with self.assertRaises(ValueError):
            next(results)

    def test_early_exit_stops_the_worker(self):
        """Test that abandoning the iterator stops the worker."""
        calls = []

        def record(value):
            calls.append(value)
            return value

        results = prefetch(record, range(1000), depth=2)
        assert next(results) == 0
        results.close()
        assert len(calls) < 1000

    def test_depth_must_be_positive(self):
        """Test that the look-ahead depth must be positive."""
        with self.assertRaises(TwinLiteValidationError):
            list(prefetch(demo_func, [1], depth=0))


if __name__ == "__main__":
    unittest.main()
