import contextlib

import pytest

_LINES: dict[int, str] = {}


@pytest.fixture
def criterion():
    """Context manager recording one pass/fail line for an acceptance criterion."""

    @contextlib.contextmanager
    def record(number: int, title: str):
        notes: list[str] = []
        try:
            yield notes
        except BaseException as exc:
            reason = str(exc).strip().splitlines()[0] if str(exc).strip() else type(exc).__name__
            _LINES[number] = f"criterion {number:2d} FAIL  {title}: {reason}"
            raise
        _LINES[number] = f"criterion {number:2d} PASS  {title}" + (f" ({'; '.join(notes)})" if notes else "")

    return record


def pytest_terminal_summary(terminalreporter):
    if not _LINES:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(_LINES):
        terminalreporter.write_line(_LINES[n])
