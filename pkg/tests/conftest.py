import pytest

_criterion_lines: list[str] = []


@pytest.fixture
def report():
    """Record a pass/fail line for the acceptance summary, then assert it."""

    def record(number, title, ok, detail):
        _criterion_lines.append(f"criterion {number} {title}: {'PASS' if ok else 'FAIL'} | {detail}")
        assert ok, detail

    return record


def pytest_terminal_summary(terminalreporter):
    if _criterion_lines:
        terminalreporter.section("acceptance criteria")
        for line in sorted(_criterion_lines, key=lambda s: int(s.split()[1])):
            terminalreporter.write_line(line)
