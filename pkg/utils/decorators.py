import logging
import time
from functools import wraps


def timed(f):
    """Logs the wall time of a call to the wrapped function's module logger."""

    @wraps(f)
    def wrapper(*args, **kwargs):
        start = time.perf_counter()
        try:
            return f(*args, **kwargs)
        finally:
            elapsed = time.perf_counter() - start
            logging.getLogger(f.__module__).info(
                f"{f.__name__} finished in {elapsed:.2f}s"
            )

    return wrapper
