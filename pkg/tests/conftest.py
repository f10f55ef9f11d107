import copy

import pytest

from chaoslab.sim.topology import fixture_doc, load_topology


def small_doc(**traffic):
    """Two-service, one-region topology used by unit tests."""
    doc = {
        "services": [
            {"id": "front", "criticality": "critical", "fallback": "none", "capacity_per_instance": 100,
             "base_latency": 10, "queue": {"policy": "bounded", "max": 50}, "memory_limit": 100,
             "instances_per_region": 2},
            {"id": "back", "criticality": "degradable", "fallback": {"kind": "default-value", "label": "stale"},
             "capacity_per_instance": 100, "base_latency": 5, "queue": {"policy": "bounded", "max": 50},
             "memory_limit": 100, "instances_per_region": 2},
        ],
        "regions": [{"id": "r1", "routing_weight": 1}],
        "edges": [{"caller": "front", "callee": "back", "kind": "required-for-success"}],
        "entry_service": "front",
        "traffic": {"base_rate": 20, "amplitude": 0, "phase": 0, "population": 1000, "catalog": 10, **traffic},
    }
    return doc


def patched_fixture(name, service=None, **changes):
    """Fixture document with one service's fields overridden."""
    doc = copy.deepcopy(fixture_doc(name))
    for s in doc["services"]:
        if s["id"] == service:
            s.update(changes)
    return doc


@pytest.fixture
def small_topology():
    return load_topology(small_doc())


# acceptance verdict lines, printed after the run by pytest_terminal_summary
ACCEPTANCE = {}


def acceptance_line(number, ok, detail):
    line = f"criterion {number:>2}: {'PASS' if ok else 'FAIL'}  {detail}"
    ACCEPTANCE[number] = line
    print(line)
    return ok


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for number in sorted(ACCEPTANCE):
            terminalreporter.write_line(ACCEPTANCE[number])
