"""Collects acceptance-marked results and prints one PASS/FAIL line per criterion."""

import pytest

_results: dict[str, list[bool]] = {}
_labels: dict[str, str] = {}


def pytest_collection_modifyitems(items):
    for item in items:
        marker = item.get_closest_marker("acceptance")
        if marker is not None:
            key, title = marker.args
            _labels[key] = title
            _results.setdefault(key, [])


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    report = outcome.get_result()
    marker = item.get_closest_marker("acceptance")
    if marker is None:
        return
    if report.when == "call" or (report.when == "setup" and not report.passed):
        _results[marker.args[0]].append(report.passed)


def pytest_terminal_summary(terminalreporter):
    if not _results:
        return
    terminalreporter.section("acceptance criteria")
    for key in sorted(_results, key=lambda k: int(k.lstrip("AC"))):
        runs = _results[key]
        if not runs:
            status = "NOT RUN"
        else:
            status = "PASS" if all(runs) else "FAIL"
        terminalreporter.write_line(f"{status:7} {key} {_labels[key]} ({len(runs)} checks)")
