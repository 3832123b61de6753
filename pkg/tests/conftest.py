"""Shared fixtures: a verdict log for the acceptance criteria."""

import pytest

_VERDICTS: dict = {}


@pytest.fixture(scope="session")
def verdict():
    """``verdict(n, ok, detail)`` records and prints one line for criterion ``n``."""

    def record(n: int, ok: bool, detail: str) -> bool:
        line = f"criterion {n:2d}: {'PASS' if ok else 'FAIL'}  {detail}"
        _VERDICTS[n] = line
        print(line)
        return ok

    return record


def pytest_terminal_summary(terminalreporter):
    if _VERDICTS:
        terminalreporter.write_sep("=", "acceptance criteria")
        for n in sorted(_VERDICTS):
            terminalreporter.write_line(_VERDICTS[n])
