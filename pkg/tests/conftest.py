import pytest

_LINES = pytest.StashKey[list]()


@pytest.fixture
def criterion(request):
    """Record one pass/fail line for an acceptance criterion.

    Usage: ``with criterion(3, "oracle equivalence") as note: ...``; the body
    may call ``note(text)`` to attach measured values to the line.
    """
    lines = request.config.stash.setdefault(_LINES, [])

    class _Recorder:
        def __init__(self, number, title):
            self.number, self.title, self.details = number, title, []

        def __call__(self, text):
            self.details.append(str(text))

        def __enter__(self):
            return self

        def __exit__(self, exc_type, exc, tb):
            status = "PASS" if exc_type is None else "FAIL"
            detail = "; ".join(self.details)
            lines.append((self.number, f"{status} criterion {self.number}: {self.title}"
                                       + (f" ({detail})" if detail else "")))
            return False

    return _Recorder


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    lines = config.stash.get(_LINES, [])
    if lines:
        terminalreporter.section("acceptance criteria")
        for _, line in sorted(lines):
            terminalreporter.write_line(line)
