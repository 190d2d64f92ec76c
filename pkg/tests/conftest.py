import os
import sys

sys.path.insert(0, os.path.dirname(__file__))


def pytest_terminal_summary(terminalreporter):
    import helpers

    if helpers.RESULTS:
        terminalreporter.section("acceptance")
        for line in helpers.RESULTS:
            terminalreporter.write_line(line)
