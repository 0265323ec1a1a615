"""Shared pytest plumbing: collects the end-to-end acceptance verdicts and
prints them as a block at the end of the run, one line per criterion."""


def pytest_configure(config):
    config._acceptance_lines = []


def pytest_terminal_summary(terminalreporter):
    lines = getattr(terminalreporter.config, "_acceptance_lines", [])
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in sorted(lines):
            terminalreporter.write_line(line)
