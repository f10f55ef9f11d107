"""Fault specifications and their compilation into simulator hooks.

Five event classes are supported: instance termination, latency injection on
an edge, probabilistic request failure on an edge, failing a whole service,
and a region outage. The per-request kinds can be limited to a stable hash
slice of the user population; the physical kinds always hit everyone.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field, replace

from chaoslab.errors import AllRegionsDownError, SchemaError, ScopeKindMismatchError, UnknownTargetError
from chaoslab.hashing import bucket, threshold
from chaoslab.sim import kernel as K

log = logging.getLogger(__name__)

FAULT_KINDS = ("terminate-instance", "inject-latency", "fail-requests", "fail-service", "region-outage")
PHYSICAL_KINDS = ("terminate-instance", "region-outage")
OUTAGE_MODES = ("blackhole", "evacuate")

_KERNEL_KIND = {
    "inject-latency": K.F_LATENCY,
    "fail-requests": K.F_FAIL_REQUESTS,
    "fail-service": K.F_FAIL_SERVICE,
}


@dataclass(frozen=True)
class UserScope:
    """Which users a fault applies to.

    Membership is never stored: a user is in a ``fraction`` scope when its
    hash bucket under ``salt`` falls below ``fraction`` of the bucket space.
    """

    mode: str = "all"
    fraction: float = 1.0
    salt: str = ""

    def __post_init__(self):
        if self.mode not in ("all", "fraction"):
            raise SchemaError(f"unknown scope mode {self.mode!r}", "scope.mode")
        if not 0.0 <= self.fraction <= 1.0:
            raise SchemaError("fraction must lie in [0, 1]", "scope.fraction")

    @classmethod
    def everyone(cls):
        return cls("all")

    @classmethod
    def slice(cls, fraction, salt):
        return cls("fraction", float(fraction), str(salt))

    @property
    def threshold(self):
        return threshold(self.fraction)

    def to_dict(self):
        if self.mode == "all":
            return {"mode": "all"}
        return {"mode": "fraction", "fraction": self.fraction, "salt": self.salt}

    @classmethod
    def from_dict(cls, d):
        if d is None or d == "all":
            return cls.everyone()
        if not isinstance(d, dict):
            raise SchemaError("scope must be 'all' or an object", "scope")
        if d.get("mode", "fraction") == "all":
            return cls.everyone()
        try:
            return cls.slice(d["fraction"], d["salt"])
        except KeyError as exc:
            raise SchemaError(f"missing field {exc.args[0]!r}", f"scope.{exc.args[0]}") from None


def scope_match(user, scope: UserScope):
    """True when ``user`` falls inside ``scope``."""
    if scope.mode == "all":
        return True
    return bucket(user, scope.salt) < scope.threshold


@dataclass(frozen=True)
class FaultSpec:
    """One fault event.

    ``target`` is an instance id (``svc@region#k``) or service id for
    terminate-instance, a ``(caller, callee)`` pair for the edge kinds, a
    service id for fail-service and a region id for region-outage. The
    window is given in simulated milliseconds.
    """

    kind: str
    target: str | tuple
    scope: UserScope = UserScope()
    start: float = 0.0
    duration: float = 3_600_000.0
    extra_ms: float = 0.0
    jitter_ms: float = 0.0
    probability: float = 1.0
    mode: str = "evacuate"
    count: int = 1
    name: str | None = None

    def __post_init__(self):
        if self.kind not in FAULT_KINDS:
            raise SchemaError(f"unknown fault kind {self.kind!r}", "kind")
        if not (self.duration > 0 and math.isfinite(self.duration)):
            raise SchemaError("duration must be positive and finite", "window.duration")
        if self.start < 0:
            raise SchemaError("start must be >= 0", "window.start")
        if not 0.0 <= self.probability <= 1.0:
            raise SchemaError("probability must lie in [0, 1]", "params.probability")
        if self.extra_ms < 0 or self.jitter_ms < 0:
            raise SchemaError("latency parameters must be >= 0", "params.extra_ms")
        if self.mode not in OUTAGE_MODES:
            raise SchemaError(f"unknown outage mode {self.mode!r}", "params.mode")
        if self.count < 1:
            raise SchemaError("count must be >= 1", "params.count")
        edge_kind = self.kind in ("inject-latency", "fail-requests")
        if edge_kind != isinstance(self.target, tuple):
            want = "a [caller, callee] pair" if edge_kind else "a single id"
            raise SchemaError(f"{self.kind} target must be {want}", "target")

    @property
    def end(self):
        return self.start + self.duration

    @property
    def label(self):
        target = "->".join(self.target) if isinstance(self.target, tuple) else self.target
        return self.name or f"{self.kind}:{target}"

    def to_dict(self):
        params = {}
        if self.kind == "inject-latency":
            params = {"extra_ms": self.extra_ms, "jitter_ms": self.jitter_ms}
        elif self.kind == "fail-requests":
            params = {"probability": self.probability}
        elif self.kind == "region-outage":
            params = {"mode": self.mode}
        elif self.kind == "terminate-instance":
            params = {"count": self.count}
        d = {
            "kind": self.kind,
            "target": list(self.target) if isinstance(self.target, tuple) else self.target,
            "scope": self.scope.to_dict(),
            "window": {"start": self.start, "duration": self.duration},
            "params": params,
        }
        if self.name:
            d["name"] = self.name
        return d

    @classmethod
    def from_dict(cls, d, path="fault"):
        if not isinstance(d, dict):
            raise SchemaError("fault must be an object", path)
        for key in ("kind", "target"):
            if key not in d:
                raise SchemaError(f"missing field {key!r}", f"{path}.{key}")
        target = d["target"]
        if isinstance(target, list):
            if len(target) != 2 or not all(isinstance(x, str) for x in target):
                raise SchemaError("edge target must be [caller, callee]", f"{path}.target")
            target = tuple(target)
        elif not isinstance(target, str):
            raise SchemaError("target must be a string or [caller, callee]", f"{path}.target")
        window = d.get("window", {})
        params = d.get("params", {})
        known = {"extra_ms", "jitter_ms", "probability", "mode", "count"}
        unknown = set(params) - known
        if unknown:
            raise SchemaError(f"unknown parameter {sorted(unknown)[0]!r}", f"{path}.params")
        try:
            return cls(
                kind=d["kind"],
                target=target,
                scope=UserScope.from_dict(d.get("scope")),
                start=float(window.get("start", 0.0)),
                duration=float(window.get("duration", 3_600_000.0)),
                name=d.get("name"),
                **params,
            )
        except SchemaError as exc:
            raise SchemaError(str(exc).split(": ", 1)[-1], f"{path}.{exc.path}") from None
        except (TypeError, ValueError) as exc:
            raise SchemaError(str(exc), path) from None


# ---------------------------------------------------------------------------
# compilation


def _parse_instance(target):
    """``svc@region#k`` -> (svc, region, k), or None for a plain service id."""
    if "@" not in target:
        return None
    svc, rest = target.split("@", 1)
    region, _, k = rest.partition("#")
    try:
        return svc, region, int(k)
    except ValueError:
        raise UnknownTargetError(f"malformed instance id {target!r}", "target") from None


@dataclass
class CompiledFault:
    """Runtime hooks of one fault, bound to a world by :meth:`install`."""

    spec: FaultSpec
    name: str
    victims: list = field(default_factory=list)
    row: int | None = None
    _outage_prev: bool | None = None

    @property
    def window(self):
        return self.spec.start, self.spec.end

    def in_window(self, t):
        return self.spec.start <= t < self.spec.end

    def intercepts(self, user, t):
        """Whether a call by ``user`` at ``t`` is affected (per-call predicate)."""
        return self.in_window(t) and scope_match(user, self.spec.scope)

    def install(self, world, row):
        self.row = row
        spec = self.spec
        if spec.kind not in _KERNEL_KIND:
            return
        ft = world.faults
        ft.active[row] = 0
        ft.kind[row] = _KERNEL_KIND[spec.kind]
        if spec.kind == "fail-service":
            ft.service[row] = world.service_index[spec.target]
        else:
            ft.edge[row] = world.edge_index[spec.target]
        ft.extra[row] = spec.extra_ms
        ft.jitter[row] = spec.jitter_ms
        ft.prob[row] = spec.probability
        if spec.scope.mode == "all":
            ft.scope_all[row] = 1
        else:
            # the bucket table may be reallocated, so fetch the row first
            salt_row = world.salt_row(spec.scope.salt)
            ft = world.faults
            ft.scope_all[row] = 0
            ft.salt[row] = salt_row
            ft.thresh[row] = spec.scope.threshold

    def activate(self, world, t):
        spec = self.spec
        log.info("activate %s at %.0f ms", self.name, t)
        if spec.kind in _KERNEL_KIND:
            world.faults.active[self.row] = 1
        elif spec.kind == "terminate-instance":
            pinned = _parse_instance(spec.target)
            for _ in range(spec.count):
                victim = spec.target if pinned else world.pick_victim(spec.target)
                if victim is None:
                    break
                self.victims.append(victim)
                world.kill(victim, t)
                if pinned:
                    break
        else:
            region = world.region_index[spec.target]
            if spec.mode == "blackhole":
                self._outage_prev = bool(world.state.region_down[region])
            else:
                self._outage_prev = bool(world.evacuated[region])
            apply_region_outage(spec.mode, spec.target, world)

    def deactivate(self, world, t):
        spec = self.spec
        log.info("revert %s at %.0f ms", self.name, t)
        if spec.kind in _KERNEL_KIND:
            world.faults.active[self.row] = 0
        elif spec.kind == "region-outage" and self._outage_prev is not None:
            if spec.mode == "blackhole":
                world.set_region_down(spec.target, self._outage_prev)
            else:
                world.set_evacuated(spec.target, self._outage_prev)
        # terminated instances stay dead: there is no respawn


def compile_fault(spec: FaultSpec, topology, name=None):
    """Check ``spec`` against ``topology`` and build its hooks."""
    if spec.kind in PHYSICAL_KINDS and spec.scope.mode != "all":
        raise ScopeKindMismatchError(f"{spec.kind} is a physical event and needs scope 'all'", "scope")
    services = set(topology.service_ids())
    if spec.kind == "terminate-instance":
        pinned = _parse_instance(spec.target)
        if pinned:
            svc, region, k = pinned
            if svc not in services or region not in topology.region_ids() or not (
                0 <= k < topology.service(svc).instances_per_region
            ):
                raise UnknownTargetError(f"no instance {spec.target!r}", "target")
        elif spec.target not in services:
            raise UnknownTargetError(f"no service {spec.target!r}", "target")
    elif spec.kind == "fail-service":
        if spec.target not in services:
            raise UnknownTargetError(f"no service {spec.target!r}", "target")
    elif spec.kind == "region-outage":
        if spec.target not in topology.region_ids():
            raise UnknownTargetError(f"no region {spec.target!r}", "target")
    else:
        if not any((e.caller, e.callee) == spec.target for e in topology.edges):
            raise UnknownTargetError(f"no edge {spec.target[0]} -> {spec.target[1]}", "target")
    return CompiledFault(spec, name or spec.label)


def apply_region_outage(mode, region, world):
    """Take ``region`` out of service.

    ``blackhole`` makes every call in the region fail while users stay routed
    there; ``evacuate`` reroutes its users to the remaining regions.
    """
    if region not in world.region_index:
        raise UnknownTargetError(f"no region {region!r}", "target")
    if mode == "blackhole":
        world.set_region_down(region, True)
    elif mode == "evacuate":
        i = world.region_index[region]
        others = [
            w > 0 and not ev
            for j, (w, ev) in enumerate(zip(world.region_weights, world.evacuated))
            if j != i
        ]
        if not any(others):
            raise AllRegionsDownError(f"evacuating {region} would leave no healthy region")
        world.set_evacuated(region, True)
    else:
        raise SchemaError(f"unknown outage mode {mode!r}", "params.mode")
    return world


# ---------------------------------------------------------------------------
# catalog


@dataclass(frozen=True)
class FaultTemplate:
    """A named, parameterizable fault recipe; targets are supplied per use."""

    name: str
    kind: str
    defaults: dict
    description: str

    def instantiate(self, target, scope=None, start=0.0, duration=3_600_000.0, name=None, **params):
        if isinstance(target, list):
            target = tuple(target)
        return FaultSpec(kind=self.kind, target=target, scope=scope or UserScope.everyone(),
                         start=start, duration=duration, name=name, **{**self.defaults, **params})


def builtin_catalog():
    return [
        FaultTemplate("chaos-monkey", "terminate-instance", {"count": 1},
                      "terminate randomly chosen instances of a service"),
        FaultTemplate("latency-fit", "inject-latency", {"extra_ms": 100.0, "jitter_ms": 0.0},
                      "add latency to calls on one edge"),
        FaultTemplate("failure-fit", "fail-requests", {"probability": 1.0},
                      "fail calls on one edge with a fixed probability"),
        FaultTemplate("service-blackout", "fail-service", {},
                      "fail every call into a service"),
        FaultTemplate("chaos-kong", "region-outage", {"mode": "evacuate"},
                      "take a region out of service, by default by evacuating it"),
    ]


def template(name):
    for t in builtin_catalog():
        if t.name == name:
            return t
    raise KeyError(name)


def with_scope(spec: FaultSpec, scope: UserScope):
    return replace(spec, scope=scope)
