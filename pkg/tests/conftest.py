import pytest

ACCEPTANCE: dict[int, tuple[bool, str, str]] = {}


@pytest.fixture(scope="session")
def record():
    """``record(n, ok, title, detail)`` stores the verdict for acceptance criterion ``n``."""

    def _record(n: int, ok: bool, title: str, detail: str) -> bool:
        ACCEPTANCE[n] = (bool(ok), title, detail)
        print(f"{'PASS' if ok else 'FAIL'} criterion {n} [{title}]: {detail}")
        return bool(ok)

    return _record


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(ACCEPTANCE):
        ok, title, detail = ACCEPTANCE[n]
        terminalreporter.write_line(f"{'PASS' if ok else 'FAIL'} criterion {n} [{title}]: {detail}")
