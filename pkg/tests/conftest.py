"""Acceptance bookkeeping: one PASS/FAIL line per numbered criterion."""
from collections import defaultdict

import pytest

CRITERIA = {
    1: "Warning-distance reproduction",
    2: "Final-gap envelope",
    3: "Naive braking curve",
    4: "KF slip rejection",
    5: "KF numerical invariants",
    6: "Branch reset",
    7: "Codec and channel properties",
    8: "Warning rule cross-validation",
    9: "Integrator convergence",
}

_items: dict[str, int] = {}
_outcomes: dict[int, list[bool]] = defaultdict(list)


def pytest_configure(config):
    config.addinivalue_line("markers", "acceptance(n): test belongs to acceptance criterion n")


def pytest_collection_modifyitems(items):
    for item in items:
        marker = item.get_closest_marker("acceptance")
        if marker is not None:
            _items[item.nodeid] = marker.args[0]


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    report = outcome.get_result()
    n = _items.get(item.nodeid)
    if n is None:
        return
    if report.when == "call" or (report.when == "setup" and not report.passed):
        _outcomes[n].append(report.passed)


def pytest_terminal_summary(terminalreporter):
    if not _outcomes:
        return
    terminalreporter.section("acceptance criteria")
    for n, title in CRITERIA.items():
        results = _outcomes.get(n)
        if not results:
            status = "NOT RUN"
        else:
            status = "PASS" if all(results) else "FAIL"
        terminalreporter.write_line(f"{status} criterion {n}: {title} ({sum(results or [])}/{len(results or [])} checks)")
