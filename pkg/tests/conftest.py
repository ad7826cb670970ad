import re
import sys


def pytest_terminal_summary(terminalreporter):
    module = sys.modules.get("test_acceptance")
    if module is None:
        return
    ran = set()
    for reports in terminalreporter.stats.values():
        for report in reports:
            if getattr(report, "when", None) not in ("setup", "call"):
                continue
            match = re.search(r"test_acceptance\.py::test_(\d\d)_", report.nodeid)
            if match:
                ran.add(int(match.group(1)))
    if not ran:
        return
    terminalreporter.section("acceptance criteria")
    for number, line in enumerate(module.summary_lines(), start=1):
        if number in ran:
            terminalreporter.write_line(line)
