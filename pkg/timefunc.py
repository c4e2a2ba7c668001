"""Build the timefunc decorator."""

import time
import functools


def timefunc(func):
    """Report the wall-clock time of each call and keep it on the wrapper.

    The last duration is available as ``wrapper.last_elapsed`` (seconds);
    run manifests read it after a command finishes.
    """

    @functools.wraps(func)
    def time_closure(*args, **kwargs):
        start = time.perf_counter()
        try:
            return func(*args, **kwargs)
        finally:
            time_closure.last_elapsed = time.perf_counter() - start
            print(f"Function: {func.__name__}, Time: {time_closure.last_elapsed:.3f}s")

    time_closure.last_elapsed = None
    return time_closure
