"""Deterministic discrete-event simulator standing in for production."""

from chaoslab.sim.topology import Topology, load_fixture, load_topology
from chaoslab.sim.world import Outcome, Request, SimEvent, WorldState, build_world, process_call, route_request, run_until
from chaoslab.sim.traffic import generate_arrivals

__all__ = [
    "Outcome",
    "Request",
    "SimEvent",
    "Topology",
    "WorldState",
    "build_world",
    "generate_arrivals",
    "load_fixture",
    "load_topology",
    "process_call",
    "route_request",
    "run_until",
]
