import pytest

# (criterion, passed, detail) rows appended by the acceptance suite
ACCEPTANCE = []


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for name, passed, detail in ACCEPTANCE:
        terminalreporter.write_line(f"{'PASS' if passed else 'FAIL'}  {name}: {detail}")


@pytest.fixture
def criterion():
    """Record one acceptance line, then assert it."""

    def check(name, passed, detail):
        ACCEPTANCE.append((name, bool(passed), detail))
        print(f"{'PASS' if passed else 'FAIL'}  {name}: {detail}")
        assert passed, f"{name}: {detail}"

    return check
