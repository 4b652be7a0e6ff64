import pytest

_GATE = pytest.StashKey[dict]()


@pytest.fixture(scope="session")
def gate(request):
    """Criterion number -> (passed, title, detail), printed as a block at the end of the run."""
    return request.config.stash.setdefault(_GATE, {})


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    results = config.stash.get(_GATE, None)
    if not results:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(results):
        ok, title, detail = results[n]
        terminalreporter.write_line(f"{'PASS' if ok else 'FAIL'}  {n:2d}. {title}: {detail}")
