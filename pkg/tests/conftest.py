import pytest

_LINES = pytest.StashKey[list]()


@pytest.fixture
def record(request):
    """Print and keep one acceptance verdict line; the lines are repeated in the session summary."""
    lines = request.config.stash.setdefault(_LINES, [])

    def _record(number: int, ok: bool, detail: str) -> None:
        line = f"criterion {number}: {'PASS' if ok else 'FAIL'}  {detail}"
        print(line)
        lines.append(line)

    return _record


def pytest_terminal_summary(terminalreporter, config):
    lines = config.stash.get(_LINES, [])
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in sorted(lines, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)
