"""Prints one PASS/FAIL line per acceptance criterion after the run.

Tests opt in with ``@pytest.mark.criterion(n)``; a criterion passes only if
every test carrying its number passed.
"""

import pytest

_CRITERIA = {}
_OUTCOMES = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(n): test belongs to acceptance criterion n")


def pytest_collection_finish(session):
    for item in session.items:
        mark = item.get_closest_marker("criterion")
        if mark is not None:
            _CRITERIA[item.nodeid] = mark.args[0]


def pytest_runtest_logreport(report):
    n = _CRITERIA.get(report.nodeid)
    if n is None:
        return
    if report.when == "call":
        _OUTCOMES.setdefault(n, []).append(report.passed)
    elif report.failed:  # setup/teardown error
        _OUTCOMES.setdefault(n, []).append(False)


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(set(_CRITERIA.values())):
        results = _OUTCOMES.get(n)
        if not results:
            status = "NOT RUN"
        else:
            status = "PASS" if all(results) else "FAIL"
        terminalreporter.write_line(f"Criterion {n}: {status}")
