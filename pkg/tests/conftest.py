import pytest

# criterion number -> (title, passed); filled by the acceptance tests
ACCEPTANCE = {}


@pytest.fixture
def record():
    """``record(n, title, ok)`` stores one acceptance outcome and asserts it."""

    def _record(n, title, ok, detail=""):
        ACCEPTANCE[n] = (title, bool(ok), detail)
        assert ok, f"criterion {n} ({title}) failed: {detail}"

    return _record


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(ACCEPTANCE):
        title, ok, detail = ACCEPTANCE[n]
        terminalreporter.write_line(f"[{'PASS' if ok else 'FAIL'}] {n:>2}. {title}" + (f"  ({detail})" if detail else ""))
