import contextlib

import pytest

# criterion number -> (passed, detail); filled by the acceptance tests
ACCEPTANCE = {}


@contextlib.contextmanager
def criterion(number, title):
    """Record PASS/FAIL for an acceptance criterion around its assertions."""
    detail = {"text": ""}
    try:
        yield detail
    except BaseException as exc:
        msg = str(exc).strip().splitlines()[0] if str(exc).strip() else type(exc).__name__
        ACCEPTANCE[number] = (False, f"{title}: {detail['text']} [{msg[:160]}]")
        raise
    ACCEPTANCE[number] = (True, f"{title}: {detail['text']}")


@pytest.fixture
def acceptance():
    return criterion


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(ACCEPTANCE):
        ok, text = ACCEPTANCE[number]
        terminalreporter.write_line(f"criterion {number}: {'PASS' if ok else 'FAIL'} - {text}")
