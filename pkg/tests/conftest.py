import sys
from pathlib import Path

import pytest

sys.path.insert(0, str(Path(__file__).parent))

# criterion number -> (title, passed, detail)
_criteria: dict[int, tuple[str, bool, str]] = {}


@pytest.hookimpl(wrapper=True)
def pytest_runtest_makereport(item, call):
    report = yield
    marker = item.get_closest_marker("criterion")
    if marker is None:
        return report
    number, title = marker.args
    detail = dict(item.user_properties).get("detail", "")
    if report.when == "call" or report.failed:
        _criteria[number] = (title, report.passed, detail)
    return report


def pytest_terminal_summary(terminalreporter):
    if not _criteria:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_criteria):
        title, passed, detail = _criteria[number]
        line = f"[{'PASS' if passed else 'FAIL'}] criterion {number:2d}: {title}"
        terminalreporter.write_line(f"{line} ({detail})" if detail else line)
