import pytest

_VERDICTS: list[str] = []


@pytest.fixture
def verdict(request):
    """Record one PASS/FAIL line for an acceptance criterion."""
    recorded = []

    def record(number: int, ok: bool, detail: str):
        line = f"criterion {number}: {'PASS' if ok else 'FAIL'} - {detail}"
        recorded.append(line)
        _VERDICTS.append(line)
        print(line, flush=True)
        return ok

    yield record
    if not recorded:
        line = f"criterion ?: FAIL - {request.node.name} raised before reaching a verdict"
        _VERDICTS.append(line)


def pytest_terminal_summary(terminalreporter):
    if _VERDICTS:
        terminalreporter.write_sep("=", "acceptance criteria")
        for line in sorted(_VERDICTS):
            terminalreporter.write_line(line)
