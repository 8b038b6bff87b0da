"""Collects acceptance verdicts and prints them as one block at the end of the run."""

VERDICTS = []


def record_verdict(criterion, ok, detail=""):
    VERDICTS.append((criterion, bool(ok), detail))


def pytest_terminal_summary(terminalreporter):
    if not VERDICTS:
        return
    terminalreporter.section("acceptance criteria")
    for criterion, ok, detail in sorted(VERDICTS, key=lambda v: v[0]):
        terminalreporter.write_line(f"{criterion:<4} {'PASS' if ok else 'FAIL'}  {detail}")
