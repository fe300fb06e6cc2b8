import functools
import time

import pytest

# criterion number -> (title, passed, detail, seconds)
ACCEPTANCE: dict[int, tuple[str, bool, str, float]] = {}


def criterion(number: int, title: str):
    """Record the outcome of an acceptance test for the end-of-run summary.

    The wrapped test may return a short string describing what it measured.
    """

    def wrap(fn):
        @functools.wraps(fn)
        def inner(*args, **kwargs):
            start = time.perf_counter()
            try:
                detail = fn(*args, **kwargs)
            except BaseException as exc:
                ACCEPTANCE[number] = (title, False, f"{type(exc).__name__}: {str(exc).splitlines()[0] if str(exc) else ''}",
                                      time.perf_counter() - start)
                raise
            ACCEPTANCE[number] = (title, True, detail or "", time.perf_counter() - start)

        return inner

    return wrap


def acceptance_lines() -> list[str]:
    lines = []
    for n in sorted(ACCEPTANCE):
        title, ok, detail, secs = ACCEPTANCE[n]
        line = f"criterion {n:>2} {'PASS' if ok else 'FAIL'}  {title} [{secs:.1f}s]"
        if detail:
            line += f"  ({detail})"
        lines.append(line)
    return lines


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for line in acceptance_lines():
            terminalreporter.write_line(line)


@pytest.fixture
def rng():
    import numpy as np

    return np.random.default_rng(12345)
