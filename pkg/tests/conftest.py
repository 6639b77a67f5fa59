import pytest

_ACCEPTANCE: list[str] = []


@pytest.fixture
def report():
    """Record one PASS/FAIL line for an acceptance criterion, then assert it."""

    def _report(number: int, passed: bool, detail: str, seconds: float | None = None):
        timing = f" [{seconds:.1f}s]" if seconds is not None else ""
        line = f"criterion {number:>2}: {'PASS' if passed else 'FAIL'}  {detail}{timing}"
        _ACCEPTANCE.append(line)
        print(line)
        assert passed, line

    return _report


def pytest_terminal_summary(terminalreporter):
    if _ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for line in sorted(_ACCEPTANCE, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)
