import pytest

_LINES = pytest.StashKey[dict]()


class AcceptanceLog:
    """Collects one verdict line per acceptance criterion for the terminal summary."""

    def __init__(self, store: dict):
        self.store = store

    def record(self, num: int, title: str, passed: bool, detail: str = "") -> str:
        line = f"criterion {num:>2}  {'PASS' if passed else 'FAIL'}  {title}"
        if detail:
            line += f"  [{detail}]"
        self.store[num] = line
        print(line)
        return line


@pytest.fixture
def acceptance(request):
    return AcceptanceLog(request.config.stash.setdefault(_LINES, {}))


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    lines = config.stash.get(_LINES, {})
    if lines:
        terminalreporter.section("acceptance criteria")
        for num in sorted(lines):
            terminalreporter.write_line(lines[num])
