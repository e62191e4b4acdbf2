"""Prints one pass/fail line per acceptance criterion at the end of the run."""

import pytest

_criteria: dict[int, list] = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(n): numbered acceptance criterion")


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    marker = item.get_closest_marker("criterion")
    if marker is None or not (rep.when == "call" or rep.failed):
        return
    n = marker.args[0]
    ok, details = _criteria.get(n, (True, []))
    details = details + [v for k, v in item.user_properties if k == "detail"]
    _criteria[n] = [ok and rep.passed, details]


def pytest_terminal_summary(terminalreporter):
    if not _criteria:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(_criteria):
        ok, details = _criteria[n]
        line = f"criterion {n:2d}: {'PASS' if ok else 'FAIL'}"
        if details:
            line += "  " + "; ".join(dict.fromkeys(details))
        terminalreporter.write_line(line)
