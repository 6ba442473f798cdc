"""Shared pytest hooks: the acceptance suite's per-criterion summary."""

import pytest

_ACCEPTANCE = {}


@pytest.fixture
def criterion():
    """``criterion(number, passed, detail)`` records one acceptance verdict."""

    def record(number, passed, detail):
        _ACCEPTANCE[number] = (bool(passed), detail)
        return passed

    return record


def pytest_terminal_summary(terminalreporter):
    if not _ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_ACCEPTANCE):
        passed, detail = _ACCEPTANCE[number]
        terminalreporter.write_line(f"criterion {number}: {'PASS' if passed else 'FAIL'}  {detail}")


@pytest.fixture(scope="session")
def experiments():
    """Session cache of the end-to-end training runs (see experiments.py)."""
    from experiments import Experiments

    return Experiments()
