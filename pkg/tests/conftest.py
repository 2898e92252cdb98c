"""Collects one verdict line per acceptance criterion and prints them after the run."""

VERDICTS: dict[int, str] = {}
EXTRA: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if not VERDICTS:
        return
    tr = terminalreporter
    tr.section("acceptance criteria")
    for k in sorted(VERDICTS):
        tr.write_line(VERDICTS[k])
    for line in EXTRA:
        tr.write_line(line)
