import sys


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    # The acceptance module collects one PASS/FAIL line per criterion;
    # echo them after the test summary so a plain pytest run shows the
    # scoreboard without extra flags.
    mod = sys.modules.get("test_acceptance")
    lines = list(getattr(mod, "CRITERION_LINES", ())) if mod else []
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in lines:
            terminalreporter.write_line(line)
