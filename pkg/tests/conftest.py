import pytest

# acceptance lines, repeated in the terminal summary
CRITERIA_LINES: list[str] = []


@pytest.fixture
def criterion_line(request):
    reporter = request.config.pluginmanager.get_plugin("terminalreporter")

    def emit(text: str) -> None:
        CRITERIA_LINES.append(text)
        if reporter is not None:
            reporter.write_line("")
            reporter.write_line(text)

    return emit


def pytest_terminal_summary(terminalreporter):
    if CRITERIA_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(CRITERIA_LINES):
            terminalreporter.write_line(line)
