import pytest

_ACCEPTANCE: list = []


@pytest.fixture
def criterion(capsys):
    """Record one acceptance criterion: print its line, then assert every check."""

    def record(number, title, checks):
        ok = all(passed for _, passed, _ in checks)
        detail = "; ".join(f"{name}={value}" for name, _, value in checks)
        failed = [name for name, passed, _ in checks if not passed]
        line = f"criterion {number:>2} [{'PASS' if ok else 'FAIL'}] {title} :: {detail}"
        _ACCEPTANCE.append(line)
        with capsys.disabled():
            print("\n" + line)
        assert ok, f"criterion {number} failed checks: {failed}"

    return record


def pytest_terminal_summary(terminalreporter):
    if _ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for line in _ACCEPTANCE:
            terminalreporter.write_line(line)
