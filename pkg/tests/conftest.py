import pytest

_ACCEPTANCE_LINES: list[str] = []


@pytest.fixture(scope="session")
def accept():
    """Record one acceptance line; returns ``ok`` so tests can assert on it."""
    def record(criterion: str, name: str, measured, tolerance, ok: bool, note: str = "") -> bool:
        line = (f"[{'PASS' if ok else 'FAIL'}] criterion {criterion:<3} {name}: "
                f"measured={measured} tolerance={tolerance}")
        if note:
            line += f" ({note})"
        _ACCEPTANCE_LINES.append(line)
        print(line)
        return ok
    return record


def pytest_terminal_summary(terminalreporter):
    if _ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in _ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
