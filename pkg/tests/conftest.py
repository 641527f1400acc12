import pytest

_ACCEPTANCE = {}


@pytest.fixture
def verdict():
    """Record a named acceptance verdict; lines are echoed in the terminal summary."""

    def record(name, ok, detail):
        line = f"{'PASS' if ok else 'FAIL'}  {name}: {detail}"
        _ACCEPTANCE[name] = line
        print(line)
        return ok

    return record


def pytest_terminal_summary(terminalreporter):
    if _ACCEPTANCE:
        terminalreporter.section("acceptance verdicts")
        for line in _ACCEPTANCE.values():
            terminalreporter.write_line(line)
