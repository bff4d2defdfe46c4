import os
import sys
import time
from contextlib import contextmanager

import pytest

sys.path.insert(0, os.path.dirname(__file__))

_ACCEPTANCE = []


class _Outcome:
    def __init__(self):
        self.details = []

    def note(self, text):
        self.details.append(text)


@contextmanager
def _criterion(name):
    out = _Outcome()
    t0 = time.perf_counter()
    try:
        yield out
    except BaseException as exc:
        out.note(f"{type(exc).__name__}: {str(exc).splitlines()[0] if str(exc) else ''}")
        _ACCEPTANCE.append((name, False, time.perf_counter() - t0, out.details))
        raise
    _ACCEPTANCE.append((name, True, time.perf_counter() - t0, out.details))


@pytest.fixture
def criterion():
    """``with criterion("3 training viability") as c: ...`` records one pass/fail line."""
    return _criterion


def pytest_terminal_summary(terminalreporter):
    if not _ACCEPTANCE:
        return
    tr = terminalreporter
    tr.section("acceptance criteria")
    for name, ok, secs, details in sorted(_ACCEPTANCE, key=lambda r: r[0]):
        tr.write_line(f"{'PASS' if ok else 'FAIL'}  {name}  ({secs:.1f} s)"
                      + (f"  {'; '.join(details)}" if details else ""))
