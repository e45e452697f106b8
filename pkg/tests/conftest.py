import random
import sys
from pathlib import Path

import pytest

sys.path.insert(0, str(Path(__file__).parent))

from tesspay.audit import AuditLedger
from tesspay.core import Clock, IdFactory
from tesspay.gateway import load_scenario
from tesspay.gateway.system import Kernel

CRITERIA = pytest.StashKey[list]()


def pytest_configure(config):
    config.stash[CRITERIA] = []


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    lines = config.stash.get(CRITERIA, [])
    if lines:
        terminalreporter.section("acceptance criteria")
        for _, line in sorted(lines):
            terminalreporter.write_line(line)


@pytest.fixture
def criterion(request, capsys):
    """Record one acceptance line; it reads FAIL unless the test sets ``ok``."""
    box = {"ok": False, "detail": ""}
    yield box
    line = f"[{'PASS' if box['ok'] else 'FAIL'}] criterion {box['num']:>2} {box['title']}: {box['detail']}"
    request.config.stash[CRITERIA].append((box["num"], line))
    with capsys.disabled():
        print("\n" + line)


@pytest.fixture
def rng():
    return random.Random(1234)


@pytest.fixture
def clock():
    return Clock()


@pytest.fixture
def ids(rng):
    return IdFactory(rng)


@pytest.fixture
def audit(clock):
    return AuditLedger(clock)


@pytest.fixture
def kernel():
    return Kernel(5)


@pytest.fixture
def ecommerce():
    return load_scenario("ecommerce")


@pytest.fixture
def portfolio():
    return load_scenario("portfolio")
