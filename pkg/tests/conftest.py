VERDICTS: dict[int, str] = {}


def record_verdict(number: int, ok: bool, detail: str):
    line = f"criterion {number:2d}: {'PASS' if ok else 'FAIL'}  {detail}"
    VERDICTS[number] = line
    print(line)


def pytest_terminal_summary(terminalreporter):
    if not VERDICTS:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(VERDICTS):
        terminalreporter.write_line(VERDICTS[number])
