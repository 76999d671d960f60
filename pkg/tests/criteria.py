"""One PASS/FAIL line per acceptance criterion, printed by conftest at session end."""

import functools
import time

RESULTS: dict[int, str] = {}


def criterion(number: int, title: str):
    """Wrap a test that returns a short detail string; record its outcome either way."""

    def wrap(fn):
        @functools.wraps(fn)
        def run(*args, **kwargs):
            start = time.perf_counter()
            try:
                detail = fn(*args, **kwargs)
            except BaseException as exc:
                msg = str(exc).splitlines()[0] if str(exc) else type(exc).__name__
                RESULTS[number] = f"criterion {number} FAIL  {title}: {msg[:160]}"
                raise
            secs = time.perf_counter() - start
            RESULTS[number] = f"criterion {number} PASS  {title}: {detail} [{secs:.1f}s]"

        return run

    return wrap
