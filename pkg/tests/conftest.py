import functools

import pytest

from svcnum import load_scenario
from svcnum.scp_solver import run_simplified, run_two_tier

ACCEPTANCE = []


@functools.lru_cache(maxsize=None)
def scenario(name):
    return load_scenario(f"{name}.json")


@functools.lru_cache(maxsize=None)
def simplified(name):
    sc = scenario(name)
    return run_simplified(sc.network, sc.profiles, sc.config)


@functools.lru_cache(maxsize=None)
def two_tier(name):
    sc = scenario(name)
    return run_two_tier(sc.network, sc.profiles, sc.config.replace(algorithm="two-tier"))


@pytest.fixture
def criterion():
    """Record one acceptance line; printed again in the terminal summary."""

    def record(number, ok, detail):
        line = f"criterion {number:>2}: {'PASS' if ok else 'FAIL'}  {detail}"
        print(line)
        ACCEPTANCE.append((number, line))
        return ok

    return record


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for _, line in sorted(ACCEPTANCE):
        terminalreporter.write_line(line)
