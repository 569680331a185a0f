import criteria


def pytest_terminal_summary(terminalreporter):
    if not criteria.RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for key in sorted(criteria.RESULTS, key=criteria.sort_key):
        terminalreporter.write_line(criteria.line(key))
