import pytest

_ACCEPTANCE_LINES = []


@pytest.fixture(scope="session")
def verdict():
    """Record one PASS/FAIL line for an acceptance criterion."""

    def record(number: int, title: str, ok: bool, detail: str):
        line = f"criterion {number:>2} {'PASS' if ok else 'FAIL'}  {title}: {detail}"
        _ACCEPTANCE_LINES.append((number, line))
        print(line)
        return ok

    return record


def pytest_terminal_summary(terminalreporter):
    if _ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for _, line in sorted(_ACCEPTANCE_LINES):
            terminalreporter.write_line(line)
