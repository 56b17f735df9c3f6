import contextlib

import pytest

_TITLES = {}
_PARTS = {}


@pytest.fixture
def criterion():
    """Record one part of an acceptance criterion; a criterion fails if any part fails."""

    @contextlib.contextmanager
    def run(n, title):
        _TITLES.setdefault(n, title)
        notes = []
        try:
            yield notes
        except BaseException as exc:
            text = str(exc).strip()
            notes.append("FAILED " + (text.splitlines()[0] if text else type(exc).__name__))
            _PARTS.setdefault(n, []).append((False, notes))
            raise
        _PARTS.setdefault(n, []).append((True, notes))

    return run


def pytest_terminal_summary(terminalreporter):
    if not _PARTS:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(_PARTS):
        parts = _PARTS[n]
        verdict = "PASS" if all(ok for ok, _ in parts) else "FAIL"
        notes = "; ".join(x for _, ns in parts for x in ns)
        line = f"criterion {n} {verdict}: {_TITLES[n]}"
        terminalreporter.write_line(line + (f" [{notes}]" if notes else ""))
