from __future__ import annotations

import pytest

from dcmd.agents import run_mission
from dcmd.bayes import load_networks
from dcmd.graphstore import Store, load_a_priori
from dcmd.ontology import load_mission_schema
from dcmd.scenario import load_scenario


@pytest.fixture(scope="session")
def schema():
    return load_mission_schema()


@pytest.fixture(scope="session")
def nets():
    return load_networks()[0]


@pytest.fixture(scope="session")
def scenario():
    return load_scenario("mission_fig6")


@pytest.fixture
def apriori(scenario):
    store = Store()
    load_a_priori(store, scenario)
    return store


@pytest.fixture(scope="session")
def mission(scenario):
    return run_mission(scenario, 42)


# -- acceptance report --------------------------------------------------------------------------

_ACCEPTANCE = pytest.StashKey[list]()


def pytest_configure(config):
    config.stash[_ACCEPTANCE] = []


@pytest.fixture
def acceptance(request):
    """Record one PASS/FAIL line for an acceptance criterion."""
    lines = request.config.stash[_ACCEPTANCE]

    def report(number: int, title: str, ok: bool, detail: str) -> None:
        line = f"{'PASS' if ok else 'FAIL'}  criterion {number}: {title} -- {detail}"
        print(line)
        lines.append(line)

    return report


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    lines = config.stash.get(_ACCEPTANCE, [])
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in sorted(lines, key=lambda s: int(s.split("criterion ")[1].split(":")[0])):
            terminalreporter.write_line(line)
