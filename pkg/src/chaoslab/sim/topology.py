"""Topology model of the simulated control plane and its config loader."""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field
from fractions import Fraction
from importlib import resources
from pathlib import Path

import networkx as nx

from chaoslab.errors import CycleError, DanglingReferenceError, SchemaError

CRITICALITIES = ("critical", "degradable")
EDGE_KINDS = ("required-for-success", "degradable")
FALLBACK_KINDS = ("none", "default-value", "bypass-to")

FIXTURES = ("bookmark-fallback", "cache-poisoning", "unbounded-queue", "three-region", "cache-bypass")


@dataclass(frozen=True)
class CacheSpec:
    ttl: float  # simulated seconds
    cache_errors: bool = False


@dataclass(frozen=True)
class Fallback:
    kind: str = "none"
    target: str | None = None  # bypass-to only
    label: str | None = None  # default-value only, names the degraded behaviour


@dataclass(frozen=True)
class ServiceSpec:
    id: str
    criticality: str
    capacity_per_instance: float  # requests / second
    base_latency: float  # ms
    fallback: Fallback = Fallback()
    queue_max: int | None = None  # None means unbounded
    memory_limit: int = 10_000
    cache: CacheSpec | None = None
    instances_per_region: int = 1
    jitter: float = 0.1

    @property
    def unbounded(self):
        return self.queue_max is None


@dataclass(frozen=True)
class RegionSpec:
    id: str
    routing_weight: Fraction = Fraction(1)
    evacuated: bool = False
    label: str | None = None


@dataclass(frozen=True)
class Edge:
    caller: str
    callee: str
    kind: str = "required-for-success"

    @property
    def required(self):
        return self.kind == "required-for-success"


@dataclass(frozen=True)
class TrafficSpec:
    base_rate: float = 100.0  # arrivals / second
    amplitude: float = 0.5
    phase: float = 0.0  # seconds
    population: int = 100_000
    catalog: int = 1_000  # distinct content keys requested


@dataclass(frozen=True)
class Topology:
    services: tuple[ServiceSpec, ...]
    regions: tuple[RegionSpec, ...]
    edges: tuple[Edge, ...]
    entry_service: str
    traffic: TrafficSpec = TrafficSpec()
    version: int = 1
    doc: dict = field(default_factory=dict, compare=False, repr=False)

    def service(self, sid):
        for s in self.services:
            if s.id == sid:
                return s
        raise KeyError(sid)

    def service_ids(self):
        return [s.id for s in self.services]

    def region_ids(self):
        return [r.id for r in self.regions]

    def children(self, sid):
        return [e for e in self.edges if e.caller == sid]

    def graph(self):
        g = nx.DiGraph()
        g.add_nodes_from(self.service_ids())
        g.add_edges_from((e.caller, e.callee) for e in self.edges)
        return g

    def max_call_depth(self):
        """Longest dependency path, counted in services."""
        return nx.dag_longest_path_length(self.graph()) + 1

    def bumped(self, **changes):
        """Copy with ``changes`` applied and the version incremented."""
        return dataclasses.replace(self, version=self.version + 1, **changes)


# ---------------------------------------------------------------------------
# loading


def _require(doc, key, path, kind=None):
    if not isinstance(doc, dict) or key not in doc:
        raise SchemaError("missing required field", f"{path}.{key}" if path else key)
    value = doc[key]
    if kind is not None and not isinstance(value, kind) or isinstance(value, bool) and kind is not bool:
        raise SchemaError(f"expected {getattr(kind, '__name__', kind)}", f"{path}.{key}" if path else key)
    return value


def _number(doc, key, path, default=None, positive=False, nonneg=False):
    where = f"{path}.{key}"
    if key not in doc:
        if default is None:
            raise SchemaError("missing required field", where)
        return default
    value = doc[key]
    if isinstance(value, bool) or not isinstance(value, (int, float)):
        raise SchemaError("expected a number", where)
    if positive and not value > 0:
        raise SchemaError("must be > 0", where)
    if nonneg and value < 0:
        raise SchemaError("must be >= 0", where)
    return value


def _fallback(raw, path):
    if raw is None or raw == "none":
        return Fallback()
    if isinstance(raw, str):
        raw = {"kind": raw}
    if not isinstance(raw, dict):
        raise SchemaError("expected object or string", path)
    kind = raw.get("kind")
    if kind not in FALLBACK_KINDS:
        raise SchemaError(f"unknown fallback kind {kind!r}", f"{path}.kind")
    if kind == "bypass-to":
        target = raw.get("target")
        if not isinstance(target, str):
            raise SchemaError("bypass-to needs a target service id", f"{path}.target")
        return Fallback(kind, target=target)
    return Fallback(kind, label=raw.get("label"))


def _queue(raw, path):
    if raw is None or raw == "unbounded":
        return None
    if not isinstance(raw, dict):
        raise SchemaError("expected object", path)
    policy = raw.get("policy")
    if policy == "unbounded":
        return None
    if policy != "bounded":
        raise SchemaError(f"unknown queue policy {policy!r}", f"{path}.policy")
    cap = raw.get("max")
    if isinstance(cap, bool) or not isinstance(cap, int) or cap < 1:
        raise SchemaError("bounded queue max must be an integer >= 1", f"{path}.max")
    return cap


def _service(raw, path):
    sid = _require(raw, "id", path, str)
    criticality = raw.get("criticality", "critical")
    if criticality not in CRITICALITIES:
        raise SchemaError(f"unknown criticality {criticality!r}", f"{path}.criticality")
    cache = None
    if raw.get("cache") is not None:
        craw = raw["cache"]
        cpath = f"{path}.cache"
        if not isinstance(craw, dict):
            raise SchemaError("expected object", cpath)
        cache = CacheSpec(
            ttl=float(_number(craw, "ttl", cpath, positive=True)),
            cache_errors=bool(craw.get("cache_errors", False)),
        )
    instances = raw.get("instances_per_region", 1)
    if isinstance(instances, bool) or not isinstance(instances, int) or instances < 1:
        raise SchemaError("must be an integer >= 1", f"{path}.instances_per_region")
    memory_limit = raw.get("memory_limit", 10_000)
    if isinstance(memory_limit, bool) or not isinstance(memory_limit, int) or memory_limit < 1:
        raise SchemaError("must be an integer >= 1", f"{path}.memory_limit")
    jitter = _number(raw, "jitter", path, default=0.1, nonneg=True)
    if jitter >= 1:
        raise SchemaError("must be < 1", f"{path}.jitter")
    return ServiceSpec(
        id=sid,
        criticality=criticality,
        capacity_per_instance=float(_number(raw, "capacity_per_instance", path, positive=True)),
        base_latency=float(_number(raw, "base_latency", path, nonneg=True)),
        fallback=_fallback(raw.get("fallback"), f"{path}.fallback"),
        queue_max=_queue(raw.get("queue"), f"{path}.queue"),
        memory_limit=memory_limit,
        cache=cache,
        instances_per_region=instances,
        jitter=float(jitter),
    )


def _weight(raw, path):
    try:
        weight = Fraction(str(raw)) if not isinstance(raw, bool) else None
    except (ValueError, ZeroDivisionError):
        weight = None
    if weight is None or weight < 0:
        raise SchemaError("routing_weight must be a non-negative rational", path)
    return weight


def _traffic(raw):
    if raw is None:
        return TrafficSpec()
    if not isinstance(raw, dict):
        raise SchemaError("expected object", "traffic")
    amplitude = _number(raw, "amplitude", "traffic", default=0.5, nonneg=True)
    if amplitude > 1:
        raise SchemaError("amplitude > 1 makes the arrival rate negative", "traffic.amplitude")
    population = raw.get("population", 100_000)
    if isinstance(population, bool) or not isinstance(population, int) or population < 1:
        raise SchemaError("must be an integer >= 1", "traffic.population")
    catalog = raw.get("catalog", 1_000)
    if isinstance(catalog, bool) or not isinstance(catalog, int) or catalog < 1:
        raise SchemaError("must be an integer >= 1", "traffic.catalog")
    return TrafficSpec(
        base_rate=float(_number(raw, "base_rate", "traffic", positive=True)),
        amplitude=float(amplitude),
        phase=float(_number(raw, "phase", "traffic", default=0.0)),
        population=population,
        catalog=catalog,
    )


def load_topology(doc):
    """Validate a topology document and build a :class:`Topology`.

    ``doc`` may be a parsed mapping, a JSON string, or a path to a JSON file.
    Raises :class:`SchemaError`, :class:`CycleError` or
    :class:`DanglingReferenceError` naming the offending field.
    """
    if isinstance(doc, Path) or isinstance(doc, str) and not doc.lstrip().startswith("{"):
        doc = json.loads(Path(doc).read_text())
    elif isinstance(doc, str):
        try:
            doc = json.loads(doc)
        except json.JSONDecodeError as exc:
            raise SchemaError(f"document does not parse: {exc}") from None
    if not isinstance(doc, dict):
        raise SchemaError("topology document must be an object")

    raw_services = _require(doc, "services", "", list)
    services = tuple(_service(s, f"services[{i}]") for i, s in enumerate(raw_services))
    if not services:
        raise SchemaError("at least one service is required", "services")
    ids = [s.id for s in services]
    for i, sid in enumerate(ids):
        if ids.index(sid) != i:
            raise SchemaError(f"duplicate service id {sid!r}", f"services[{i}].id")

    raw_regions = _require(doc, "regions", "", list)
    if not raw_regions:
        raise SchemaError("at least one region is required", "regions")
    regions = []
    for i, r in enumerate(raw_regions):
        path = f"regions[{i}]"
        regions.append(
            RegionSpec(
                id=_require(r, "id", path, str),
                routing_weight=_weight(r.get("routing_weight", 1), f"{path}.routing_weight"),
                evacuated=bool(r.get("evacuated", False)),
                label=r.get("label"),
            )
        )
    region_ids = [r.id for r in regions]
    if len(set(region_ids)) != len(region_ids):
        raise SchemaError("duplicate region id", "regions")
    if not any(r.routing_weight > 0 and not r.evacuated for r in regions):
        raise SchemaError("no region can accept traffic", "regions")

    raw_edges = _require(doc, "edges", "", list)
    edges = []
    for i, e in enumerate(raw_edges):
        path = f"edges[{i}]"
        caller = _require(e, "caller", path, str)
        callee = _require(e, "callee", path, str)
        kind = e.get("kind", "required-for-success")
        if kind not in EDGE_KINDS:
            raise SchemaError(f"unknown edge kind {kind!r}", f"{path}.kind")
        for end, name in (("caller", caller), ("callee", callee)):
            if name not in ids:
                raise DanglingReferenceError(name, f"{path}.{end}")
        edges.append(Edge(caller, callee, kind))

    entry = _require(doc, "entry_service", "", str)
    if entry not in ids:
        raise DanglingReferenceError(entry, "entry_service")
    for i, s in enumerate(services):
        if s.fallback.kind == "bypass-to":
            if s.fallback.target not in ids:
                raise DanglingReferenceError(s.fallback.target, f"services[{i}].fallback.target")
            if s.fallback.target == s.id:
                raise SchemaError("bypass-to must not target itself", f"services[{i}].fallback.target")

    g = nx.DiGraph()
    g.add_nodes_from(ids)
    g.add_edges_from((e.caller, e.callee) for e in edges)
    try:
        cycle = nx.find_cycle(g)
    except nx.NetworkXNoCycle:
        cycle = None
    if cycle:
        raise CycleError([u for u, _ in cycle] + [cycle[0][0]])

    version = doc.get("version", 1)
    if isinstance(version, bool) or not isinstance(version, int) or version < 1:
        raise SchemaError("must be an integer >= 1", "version")

    return Topology(
        services=services,
        regions=tuple(regions),
        edges=tuple(edges),
        entry_service=entry,
        traffic=_traffic(doc.get("traffic")),
        version=version,
        doc=doc,
    )


def fixture_doc(name):
    """Parsed JSON of a shipped topology fixture."""
    if name not in FIXTURES:
        raise KeyError(f"unknown fixture {name!r}; known: {', '.join(FIXTURES)}")
    text = resources.files("chaoslab.fixtures").joinpath("topologies", f"{name}.json").read_text()
    return json.loads(text)


def load_fixture(name):
    return load_topology(fixture_doc(name))
