import oracles


def pytest_terminal_summary(terminalreporter):
    if oracles.ACCEPTANCE_LOG:
        terminalreporter.section("acceptance criteria")
        for line in sorted(oracles.ACCEPTANCE_LOG, key=lambda s: int(s.split()[1])):
            terminalreporter.write_line(line)
