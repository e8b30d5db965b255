"""Collects acceptance outcomes and prints one line per criterion at the end of the run."""

import pytest

_RESULTS: dict[int, list[tuple[str, bool, str]]] = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(n): acceptance criterion this test decides")


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    report = outcome.get_result()
    marker = item.get_closest_marker("criterion")
    if marker is None:
        return
    if report.when == "call" or (report.when == "setup" and report.failed):
        detail = "; ".join(f"{k}={v}" for k, v in item.user_properties)
        _RESULTS.setdefault(marker.args[0], []).append((item.name, report.passed, detail))


def pytest_terminal_summary(terminalreporter):
    if not _RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(_RESULTS):
        rows = _RESULTS[n]
        ok = all(passed for _, passed, _ in rows)
        details = " | ".join(d for _, _, d in rows if d)
        terminalreporter.write_line(f"criterion {n}: {'PASS' if ok else 'FAIL'}" + (f"  ({details})" if details else ""))
