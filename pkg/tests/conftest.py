# criterion number -> (passed, detail), filled in by the acceptance tests
CRITERIA: dict[int, tuple[bool, str]] = {}


def record_criterion(number: int, passed: bool, detail: str) -> None:
    CRITERIA[number] = (bool(passed), detail)
    print(f"CRITERION {number}: {'PASS' if passed else 'FAIL'}  {detail}", flush=True)


def pytest_terminal_summary(terminalreporter):
    if not CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(CRITERIA):
        passed, detail = CRITERIA[n]
        terminalreporter.write_line(f"CRITERION {n}: {'PASS' if passed else 'FAIL'}  {detail}")
