import pytest

_LINES: dict[str, str] = {}


@pytest.fixture
def criterion():
    """``criterion("A1", ok, detail)`` records one acceptance line and asserts ``ok``."""

    def record(key: str, ok: bool, detail: str) -> None:
        _LINES[key] = f"{key} {'PASS' if ok else 'FAIL'}  {detail}"
        print(_LINES[key])
        assert ok, _LINES[key]

    return record


def pytest_terminal_summary(terminalreporter):
    if _LINES:
        terminalreporter.section("acceptance criteria")
        for key in sorted(_LINES):
            terminalreporter.write_line(_LINES[key])
