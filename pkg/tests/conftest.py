import pytest

VERDICTS = pytest.StashKey[list]()


def pytest_configure(config):
    config.stash[VERDICTS] = []


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    lines = config.stash.get(VERDICTS, [])
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in sorted(lines, key=lambda s: int(s.split()[1])):
            terminalreporter.write_line(line)


@pytest.fixture
def verdict(request):
    """Record and print one PASS/FAIL line for a criterion, then assert it."""
    def record(number: int, ok: bool, detail: str):
        line = f"criterion {number} {'PASS' if ok else 'FAIL'}: {detail}"
        print("\n" + line, flush=True)
        request.config.stash[VERDICTS].append(line)
        assert ok, line
    return record
