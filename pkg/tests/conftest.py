import pytest

# criterion number -> (passed, description, detail), filled in by test_acceptance
ACCEPTANCE = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(ACCEPTANCE):
        ok, what, detail = ACCEPTANCE[n]
        terminalreporter.write_line(f"[{'PASS' if ok else 'FAIL'}] #{n:>2} {what}: {detail}")


@pytest.fixture
def criterion():
    """Record one acceptance line, then assert it."""

    def record(n, what, ok, detail=""):
        ACCEPTANCE[n] = (bool(ok), what, detail)
        print(f"[{'PASS' if ok else 'FAIL'}] #{n} {what}: {detail}")
        assert ok, f"criterion {n} failed: {detail}"

    return record
