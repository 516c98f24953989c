"""Acceptance reporting: tests marked ``criterion(n, title)`` roll up into one PASS/FAIL line per criterion."""

import pytest

_outcomes: dict[int, dict] = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(n, title): acceptance criterion a test belongs to")


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    report = outcome.get_result()
    mark = item.get_closest_marker("criterion")
    if mark is None or (report.when != "call" and not report.failed):
        return
    n, title = mark.args
    entry = _outcomes.setdefault(n, {"title": title, "passed": True, "details": []})
    entry["passed"] &= report.passed
    entry["details"] += [v for k, v in item.user_properties if k == "detail"]


def pytest_terminal_summary(terminalreporter):
    if not _outcomes:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(_outcomes):
        e = _outcomes[n]
        status = "PASS" if e["passed"] else "FAIL"
        detail = "; ".join(e["details"])
        terminalreporter.write_line(f"criterion {n:>2} {status}  {e['title']}" + (f"  [{detail}]" if detail else ""))
