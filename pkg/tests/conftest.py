import pytest

_LINES: list[str] = []


@pytest.fixture
def verdict():
    """Record one PASS/FAIL line per acceptance criterion for the summary."""

    def record(number: int, name: str, passed: bool, detail: str, seconds: float) -> None:
        _LINES.append(f"{'PASS' if passed else 'FAIL'}  [{number:>2}] {name}: {detail} ({seconds:.1f} s)")

    return record


def pytest_terminal_summary(terminalreporter):
    if _LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(_LINES, key=lambda s: int(s.split("[")[1].split("]")[0])):
            terminalreporter.write_line(line)
