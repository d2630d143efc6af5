import pytest

ACCEPTANCE: dict[int, str] = {}


@pytest.fixture
def report():
    """Record one acceptance line; the lines are printed in the terminal summary."""
    def record(number: int, passed: bool, detail: str) -> None:
        ACCEPTANCE[number] = f"criterion {number}: {'PASS' if passed else 'FAIL'}  {detail}"
        print(ACCEPTANCE[number])
    return record


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(ACCEPTANCE):
        terminalreporter.write_line(ACCEPTANCE[number])
