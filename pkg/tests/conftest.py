import sys
from pathlib import Path

import pytest

sys.path.insert(0, str(Path(__file__).parent))

# criterion number -> (passed, title, details); filled by the acceptance suite
_ACCEPTANCE: dict[int, tuple[bool, str, list[str]]] = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(n, title): acceptance criterion this test decides")


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    mark = item.get_closest_marker("criterion")
    if mark is None or rep.when == "teardown":
        return
    n, title = mark.args
    details = [str(v) for k, v in item.user_properties if k == "detail"]
    if rep.when == "setup" and not rep.passed:
        _ACCEPTANCE[n] = (False, title, details + ["setup failed"])
    elif rep.when == "call":
        _ACCEPTANCE[n] = (rep.passed, title, details)


def pytest_terminal_summary(terminalreporter):
    if not _ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(_ACCEPTANCE):
        ok, title, details = _ACCEPTANCE[n]
        line = f"criterion {n:>2} {'PASS' if ok else 'FAIL'}  {title}"
        if details:
            line += "  [" + "; ".join(details) + "]"
        terminalreporter.write_line(line)
