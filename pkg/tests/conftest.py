import os
import sys

import pytest

sys.path.insert(0, os.path.dirname(__file__))

import presets  # noqa: E402


@pytest.fixture(scope="session")
def copy_model():
    """(frozen model, corpus, TrainResult) for the copy_mod_shift 2-2 preset."""
    return presets.trained("copy")


@pytest.fixture(scope="session")
def swap_model():
    """(frozen model, corpus, TrainResult) for the lexical_swap_reorder 4-4 preset."""
    return presets.trained("swap")


def pytest_terminal_summary(terminalreporter):
    if not presets.ACCEPTANCE:
        return
    terminalreporter.write_sep("=", "acceptance criteria")
    for n in sorted(presets.ACCEPTANCE):
        ok, title, detail = presets.ACCEPTANCE[n]
        terminalreporter.write_line(f"criterion {n:2d} {'PASS' if ok else 'FAIL'}  {title}: {detail}")
