import os
from contextlib import contextmanager

import pytest
from hypothesis import HealthCheck, settings

settings.register_profile("default", max_examples=60, deadline=None,
                          suppress_health_check=[HealthCheck.too_slow])
settings.register_profile("thorough", max_examples=500, deadline=None)
settings.load_profile(os.environ.get("HYPOTHESIS_PROFILE", "default"))

_VERDICTS = []


class _Checks:
    def __init__(self):
        self.failed = []
        self.notes = []

    def check(self, ok, message):
        (self.notes if ok else self.failed).append(message)
        return ok

    def note(self, message):
        self.notes.append(message)


@pytest.fixture
def criterion(capsys):
    """``with criterion(n, title) as c: c.check(cond, msg)`` records one PASS/FAIL line."""

    @contextmanager
    def run(number, title):
        checks = _Checks()
        try:
            yield checks
        except Exception as exc:
            checks.failed.append(f"{type(exc).__name__}: {exc}")
        status = "FAIL" if checks.failed else "PASS"
        detail = "; ".join(checks.failed or checks.notes)
        line = f"{status} criterion {number:>2} ({title}): {detail}"
        _VERDICTS.append(line)
        with capsys.disabled():
            print("\n" + line)
        assert not checks.failed, line

    return run


def pytest_terminal_summary(terminalreporter):
    if _VERDICTS:
        terminalreporter.section("acceptance criteria")
        for line in _VERDICTS:
            terminalreporter.write_line(line)
