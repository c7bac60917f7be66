import pytest

ACCEPTANCE_LINES: list[str] = []


@pytest.fixture
def criterion():
    """Record one PASS/FAIL line for an acceptance criterion.

    Usage: ``with criterion("3", "reservoir uniformity") as note: ...``;
    ``note(text)`` attaches the measured values to the line.
    """
    from contextlib import contextmanager

    @contextmanager
    def _run(number, title):
        details: list[str] = []
        try:
            yield details.append
        except BaseException as exc:
            status = "SKIP" if isinstance(exc, pytest.skip.Exception) else "FAIL"
            reason = str(exc) if status == "SKIP" else "; ".join(details)
            line = f"[{status}] criterion {number}: {title} | {reason}"
            ACCEPTANCE_LINES.append(line)
            print(line)
            raise
        line = f"[PASS] criterion {number}: {title} | {'; '.join(details)}"
        ACCEPTANCE_LINES.append(line)
        print(line)

    return _run


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
