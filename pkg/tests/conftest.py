"""Prints one PASS/FAIL line per acceptance criterion at the end of the session."""

import pytest

_outcomes: dict[int, list[str]] = {}
_notes: dict[int, list[str]] = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(n): acceptance criterion number")


@pytest.fixture
def note(request):
    """Attach a short result note (a ratio, a count) to the criterion line."""
    def add(text):
        m = request.node.get_closest_marker("criterion")
        if m:
            _notes.setdefault(m.args[0], []).append(text)
    return add


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    report = outcome.get_result()
    m = item.get_closest_marker("criterion")
    if m is None:
        return
    if report.when == "call" or report.outcome != "passed":
        _outcomes.setdefault(m.args[0], []).append(report.outcome)


def pytest_terminal_summary(terminalreporter):
    if not _outcomes:
        return
    tr = terminalreporter
    tr.section("acceptance criteria")
    for n in sorted(_outcomes):
        results = _outcomes[n]
        if "failed" in results:
            status = "FAIL"
        elif all(r == "skipped" for r in results):
            status = "SKIP"
        else:
            status = "PASS"
        notes = "; ".join(_notes.get(n, []))
        tr.write_line(f"criterion {n}: {status}" + (f" - {notes}" if notes else ""))
