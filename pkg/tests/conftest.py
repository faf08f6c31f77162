import pytest

_CRITERIA = []


@pytest.fixture
def criterion():
    """Record one acceptance line: ``criterion(id, name, passed, detail)``."""
    def record(cid, name, passed, detail):
        line = f"[{'PASS' if passed else 'FAIL'}] {cid} {name}: {detail}"
        _CRITERIA.append((cid, line))
        print(line)
        return passed
    return record


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for _, line in sorted(_CRITERIA, key=lambda c: int(c[0][1:])):
        terminalreporter.write_line(line)
