import pytest

from matserve.server import Server

ACCEPTANCE_RESULTS = []


@pytest.fixture(scope="module")
def server():
    """A shared 8-worker server; sessions pick their own worker counts."""
    srv = Server(workers=8).start()
    yield srv
    srv.stop()


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    if ACCEPTANCE_RESULTS:
        terminalreporter.section("acceptance criteria")
        for name, ok in ACCEPTANCE_RESULTS:
            terminalreporter.write_line(f"{'PASS' if ok else 'FAIL'}  {name}")
