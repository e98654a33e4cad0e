import contextlib

import pytest

_RESULTS = {}


@pytest.fixture
def criterion():
    """Context manager that records a PASS/FAIL line for an acceptance criterion."""

    @contextlib.contextmanager
    def run(number, title):
        try:
            yield
        except BaseException as exc:
            _RESULTS[number] = f"FAIL  criterion {number}: {title} ({type(exc).__name__}: {str(exc).splitlines()[0] if str(exc) else ''})"
            raise
        _RESULTS[number] = f"PASS  criterion {number}: {title}"

    return run


def pytest_terminal_summary(terminalreporter):
    if not _RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_RESULTS):
        terminalreporter.write_line(_RESULTS[number])
