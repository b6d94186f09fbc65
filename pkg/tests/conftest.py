import pytest

_LINES: list[str] = []


@pytest.fixture(scope="session")
def criterion_log(pytestconfig):
    """Record one PASS/FAIL/REPORT line per acceptance criterion; echoed live and in the summary."""
    capman = pytestconfig.pluginmanager.getplugin("capturemanager")

    def log(number, status, text):
        line = f"[criterion {number}] {status}: {text}"
        _LINES.append(line)
        with capman.global_and_fixture_disabled():
            print("\n" + line, flush=True)

    return log


def pytest_terminal_summary(terminalreporter):
    if _LINES:
        terminalreporter.section("acceptance criteria")
        for line in _LINES:
            terminalreporter.write_line(line)
