import time
from contextlib import contextmanager

import pytest

_RESULTS = pytest.StashKey[dict]()


class Recorder:
    def __init__(self, store: dict):
        self.store = store

    @contextmanager
    def __call__(self, number: int, title: str, limit: float):
        start = time.perf_counter()
        try:
            yield
        except BaseException as e:
            self.store[number] = (title, False, time.perf_counter() - start, limit, f"{type(e).__name__}: {e}")
            raise
        elapsed = time.perf_counter() - start
        ok = elapsed < limit
        self.store[number] = (title, ok, elapsed, limit, "" if ok else "over time limit")
        assert ok, f"criterion {number} took {elapsed:.2f}s, limit {limit}s"


@pytest.fixture
def criterion(request):
    return Recorder(request.config.stash.setdefault(_RESULTS, {}))


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    results = config.stash.get(_RESULTS, {})
    if not results:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(results):
        title, ok, elapsed, limit, why = results[number]
        line = f"{'PASS' if ok else 'FAIL'} {number:2d} {title} ({elapsed:.2f}s / {limit:g}s)"
        if why:
            line += f"  {why.splitlines()[0][:120]}"
        terminalreporter.write_line(line)
