import pytest

_VERDICTS = []


@pytest.fixture
def verdict():
    """Print one pass/fail line for an acceptance criterion, then assert it."""

    def record(number, name, ok, detail):
        line = f"[criterion {number}] {'PASS' if ok else 'FAIL'} {name}: {detail}"
        print(line)
        _VERDICTS.append(line)
        assert ok, line

    return record


def pytest_terminal_summary(terminalreporter):
    if _VERDICTS:
        terminalreporter.write_sep("=", "acceptance criteria")
        for line in _VERDICTS:
            terminalreporter.write_line(line)
