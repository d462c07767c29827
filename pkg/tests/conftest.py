import pytest

# filled by tests/test_acceptance.py: (number, title, passed, detail)
ACCEPTANCE_LINES: list = []


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_LINES:
        return
    terminalreporter.section("acceptance criteria")
    for number, title, passed, detail in sorted(ACCEPTANCE_LINES):
        terminalreporter.write_line(f"{'PASS' if passed else 'FAIL'} {number:>2} {title}: {detail}")


@pytest.fixture(scope="session")
def acceptance_lines():
    return ACCEPTANCE_LINES
