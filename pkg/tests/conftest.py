import pytest

ACCEPTANCE_LINES: dict = {}


@pytest.fixture
def acceptance_report(request):
    """Record one pass/fail line for an acceptance criterion."""
    def report(number: int, ok: bool, detail: str) -> None:
        line = f"criterion {number:2d}: {'PASS' if ok else 'FAIL'}  {detail}"
        ACCEPTANCE_LINES[number] = line
        print(line)
    return report


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_LINES:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(ACCEPTANCE_LINES):
        terminalreporter.write_line(ACCEPTANCE_LINES[number])


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    marker = item.get_closest_marker("criterion")
    if marker is None or rep.when != "call":
        return
    number = marker.args[0]
    if rep.failed and (number not in ACCEPTANCE_LINES or "PASS" in ACCEPTANCE_LINES[number]):
        ACCEPTANCE_LINES[number] = f"criterion {number:2d}: FAIL  {call.excinfo.typename}: {call.excinfo.value}"
