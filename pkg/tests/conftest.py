import criteria


def pytest_terminal_summary(terminalreporter):
    if criteria.RESULTS:
        terminalreporter.section("acceptance criteria")
        for n in sorted(criteria.RESULTS):
            terminalreporter.write_line(criteria.RESULTS[n])
