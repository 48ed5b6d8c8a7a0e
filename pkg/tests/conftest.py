"""Shared test plumbing: the acceptance suite records one line per
criterion here, and the terminal summary prints them after the run."""

CRITERIA: dict[int, tuple[bool, str]] = {}


def record_criterion(num: int, ok: bool, detail: str) -> None:
    CRITERIA[num] = (ok, detail)


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    if not CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for num in sorted(CRITERIA):
        ok, detail = CRITERIA[num]
        status = "PASS" if ok else "FAIL"
        terminalreporter.write_line(f"criterion {num:2d}: {status}  {detail}")
