import stages


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    if stages._LINES:
        terminalreporter.write_sep("=", "acceptance summary")
        for ln in stages._LINES:
            terminalreporter.write_line(ln)
