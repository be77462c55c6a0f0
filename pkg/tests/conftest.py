import pytest

_KEY = pytest.StashKey[dict]()


@pytest.fixture
def acceptance(request):
    """Record ``(criterion, passed, detail)`` for the end-of-run acceptance report."""
    store = request.config.stash.setdefault(_KEY, {})

    def record(number: int, title: str, passed: bool, detail: str) -> None:
        store[number] = (title, bool(passed), detail)
        assert passed, f"criterion {number} ({title}): {detail}"

    return record


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    store = config.stash.get(_KEY, {})
    if not store:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(store):
        title, passed, detail = store[number]
        terminalreporter.write_line(f"{'PASS' if passed else 'FAIL'} {number:2d}. {title}: {detail}")
