import re

import pytest

_CRITERIA = {}
_PATTERN = re.compile(r"test_criterion_(\d+)_")


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    report = outcome.get_result()
    m = _PATTERN.match(item.name)
    if not m:
        return
    n = int(m.group(1))
    detail = "; ".join(str(v) for k, v in report.user_properties if k == "measured")
    failed = report.failed or (report.when == "call" and report.skipped)
    if failed:
        _CRITERIA[n] = ("FAIL", item.name, detail)
    elif report.when == "call" and n not in _CRITERIA:
        _CRITERIA[n] = ("PASS", item.name, detail)


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(_CRITERIA):
        status, name, detail = _CRITERIA[n]
        line = f"criterion {n:2d}: {status}  {name}"
        terminalreporter.write_line(line + (f"  [{detail}]" if detail else ""))
