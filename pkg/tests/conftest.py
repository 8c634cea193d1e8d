"""Collects outcomes of tests marked ``criterion`` and prints one line per criterion."""

import pytest

_outcomes = {}


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    report = (yield).get_result()
    marker = item.get_closest_marker("criterion")
    if marker is None:
        return
    name = marker.args[0]
    failed = report.failed or (report.when == "call" and report.skipped)
    if failed or name not in _outcomes:
        _outcomes[name] = "FAIL" if failed else _outcomes.get(name, "PASS")


def pytest_terminal_summary(terminalreporter):
    if not _outcomes:
        return
    terminalreporter.section("acceptance criteria")
    for name, outcome in _outcomes.items():
        terminalreporter.write_line(f"{outcome}  {name}")
