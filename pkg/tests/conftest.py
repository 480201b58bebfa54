"""Acceptance-criterion reporting: one PASS/FAIL line per ``criterion``-marked test."""

import pytest

_RESULTS: dict[int, tuple[str, str, str]] = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(n, title): acceptance criterion number n")


def pytest_runtest_makereport(item, call):
    marker = item.get_closest_marker("criterion")
    if marker is None or call.when not in ("setup", "call"):
        return
    n, title = marker.args
    failed = call.excinfo is not None
    if call.when == "setup" and not failed:
        return
    detail = "; ".join(str(v) for k, v in item.user_properties if k == "detail")
    if failed:
        detail = (detail + "; " if detail else "") + call.excinfo.exconly().splitlines()[0][:200]
    _RESULTS[n] = ("FAIL" if failed else "PASS", title, detail)


def pytest_terminal_summary(terminalreporter):
    if not _RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(_RESULTS):
        status, title, detail = _RESULTS[n]
        terminalreporter.write_line(f"[{status}] criterion {n}: {title}" +
                                    (f" -- {detail}" if detail else ""))


@pytest.fixture
def detail(record_property):
    def add(msg):
        record_property("detail", msg)
    return add
