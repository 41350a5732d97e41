"""Collects acceptance verdicts and prints them after the run."""

VERDICTS: list = []


def record(criterion: str, ok: bool, detail: str = "") -> None:
    VERDICTS.append((criterion, ok, detail))
    print(f"{criterion}: {'PASS' if ok else 'FAIL'} {detail}")


def pytest_terminal_summary(terminalreporter):
    if not VERDICTS:
        return
    terminalreporter.section("acceptance")
    for criterion, ok, detail in sorted(VERDICTS, key=lambda v: int(v[0].split("-")[1])):
        terminalreporter.write_line(f"{criterion}: {'PASS' if ok else 'FAIL'}  {detail}")
