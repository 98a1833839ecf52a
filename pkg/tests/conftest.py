"""Collects the acceptance verdicts and prints them after the run."""

VERDICTS: list[str] = []


def record(number: int, label: str, ok: bool, detail: str) -> None:
    VERDICTS.append(f"criterion {number:2d} {'PASS' if ok else 'FAIL'}  {label}: {detail}")


def pytest_terminal_summary(terminalreporter):
    if not VERDICTS:
        return
    terminalreporter.section("acceptance criteria")
    for line in VERDICTS:
        terminalreporter.write_line(line)
