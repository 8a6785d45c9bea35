import pytest

_CRITERIA: list[str] = []


@pytest.fixture
def report(request):
    """Print one PASS/FAIL line per acceptance criterion, live and again in the summary."""
    capman = request.config.pluginmanager.getplugin("capturemanager")

    def emit(number: int, passed: bool, detail: str) -> bool:
        line = f"{'PASS' if passed else 'FAIL'} criterion {number}: {detail}"
        _CRITERIA.append(line)
        with capman.global_and_fixture_disabled():
            print(f"\n{line}", flush=True)
        return passed

    return emit


def pytest_terminal_summary(terminalreporter):
    if _CRITERIA:
        terminalreporter.section("acceptance criteria")
        for line in sorted(_CRITERIA, key=lambda s: int(s.split()[2].rstrip(":"))):
            terminalreporter.write_line(line)
