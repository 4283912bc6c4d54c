import pytest

_LEDGER = []


@pytest.fixture
def criterion():
    """Record one acceptance line: ``criterion(n, ok, detail)``, then assert ``ok``."""

    def record(number, ok, detail):
        _LEDGER.append((number, bool(ok), detail))
        print(f"criterion {number}: {'PASS' if ok else 'FAIL'}  {detail}")
        assert ok, detail

    return record


def pytest_terminal_summary(terminalreporter):
    if not _LEDGER:
        return
    terminalreporter.section("acceptance criteria")
    for number, ok, detail in sorted(_LEDGER, key=lambda x: x[0]):
        terminalreporter.write_line(f"criterion {number:>2}: {'PASS' if ok else 'FAIL'}  {detail}")
