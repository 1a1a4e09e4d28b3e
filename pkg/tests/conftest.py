import pytest

# (criterion, passed, detail) lines collected by the acceptance suite
ACCEPTANCE_LINES: list[tuple[str, bool, str]] = []


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_LINES:
        return
    terminalreporter.section("acceptance criteria")
    for name, ok, detail in ACCEPTANCE_LINES:
        terminalreporter.write_line(f"criterion {name:<10} {'PASS' if ok else 'FAIL'}  {detail}")


@pytest.fixture
def acceptance_record():
    def record(name, ok, detail):
        ACCEPTANCE_LINES.append((name, bool(ok), detail))
        print(f"criterion {name}: {'PASS' if ok else 'FAIL'}  {detail}")
        return bool(ok)

    return record
