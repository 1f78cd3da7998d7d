"""Collects the acceptance verdicts and prints them after the run."""

ACCEPTANCE: dict[int, tuple[str, bool, str]] = {}


def record(number: int, name: str, passed: bool, detail: str = "") -> bool:
    ACCEPTANCE[number] = (name, bool(passed), detail)
    return bool(passed)


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(ACCEPTANCE):
        name, passed, detail = ACCEPTANCE[number]
        line = f"{'PASS' if passed else 'FAIL'}  {number:>2}. {name}"
        terminalreporter.write_line(f"{line}: {detail}" if detail else line)
