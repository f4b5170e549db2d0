import sys


def pytest_terminal_summary(terminalreporter):
    mod = sys.modules.get("test_acceptance")
    if mod is None:
        return
    terminalreporter.section("acceptance criteria")
    for n in range(1, 13):
        line = mod.RESULTS.get(n, f"criterion {n:2d}  NOT RUN  {mod.TITLES[n]}")
        terminalreporter.write_line(line)
