import pytest

_LINES: list[str] = []


@pytest.fixture
def report(capsys):
    """Print one PASS/FAIL line for an acceptance criterion and keep it for the summary."""

    def emit(number, ok, detail):
        line = f"{'PASS' if ok else 'FAIL'} criterion {number}: {detail}"
        _LINES.append(line)
        with capsys.disabled():
            print(f"\n{line}")
        return ok

    return emit


def pytest_terminal_summary(terminalreporter):
    if _LINES:
        terminalreporter.section("acceptance criteria")
        for line in _LINES:
            terminalreporter.write_line(line)
