import json
from pathlib import Path

import numpy as np
import pytest

from adastyle.toy_backend import ToyBackend

FIXTURES = Path(__file__).parent / "fixtures"


@pytest.fixture(scope="session")
def backend():
    return ToyBackend(0)


@pytest.fixture(scope="session")
def golden():
    return json.loads((FIXTURES / "golden.json").read_text())


@pytest.fixture
def style_ref():
    return str(FIXTURES / "style_ref.png")


@pytest.fixture
def style_neg():
    return str(FIXTURES / "style_neg.png")


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


_ACCEPTANCE = {}


def record_acceptance(number, title, ok, detail=""):
    line = f"[{'PASS' if ok else 'FAIL'}] criterion {number:2d}: {title} ({detail})"
    _ACCEPTANCE[number] = line
    print(line)


def pytest_terminal_summary(terminalreporter):
    if not _ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_ACCEPTANCE):
        terminalreporter.write_line(_ACCEPTANCE[number])
