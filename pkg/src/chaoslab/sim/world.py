"""World state and the event loop of the simulated production system."""

from __future__ import annotations

import hashlib
import heapq
import itertools
import logging
import random
from dataclasses import dataclass, field

import networkx as nx
import numpy as np

from chaoslab.errors import AllRegionsDownError, ChaoslabError
from chaoslab.hashing import bucket_array, derive_seed
from chaoslab.metrics import MetricSink, GROUPS
from chaoslab.sim import kernel as K
from chaoslab.sim.routing import region_salt, route_table
from chaoslab.sim.topology import Topology
from chaoslab.sim.traffic import generate_arrivals

log = logging.getLogger(__name__)

EVENT_KINDS = (
    "arrival",
    "call-dispatch",
    "call-complete",
    "instance-death",
    "fault-activate",
    "fault-revert",
    "window-close",
)

MAX_FAULTS = 32
MAX_SERVICES = 62  # degraded-feature bitmask is an int64
COMPLETION_HORIZON = 512  # windows kept open ahead of the clock for late completions


@dataclass(order=True)
class SimEvent:
    time: float  # simulated ms
    seq: int
    kind: str = field(compare=False)
    payload: dict = field(default_factory=dict, compare=False)


@dataclass(frozen=True)
class Request:
    user: int
    key: int = 0
    time: float | None = None  # defaults to the world clock
    region: str | None = None  # defaults to the user's routed region


@dataclass(frozen=True)
class Outcome:
    status: str  # success | fallback-success | failure
    latency: float
    reason: str = ""
    degraded: tuple = ()

    @property
    def started(self):
        return self.status != "failure"


_STATUS = ("success", "fallback-success", "failure")


def _grow(arr, n, fill=0):
    """Copy of ``arr`` with the first axis grown to at least ``n``."""
    if arr.shape[0] >= n:
        return arr
    size = max(n, 2 * arr.shape[0], 16)
    out = np.full((size,) + arr.shape[1:], fill, dtype=arr.dtype)
    out[: arr.shape[0]] = arr
    return out


class WorldState:
    """Everything one simulation run owns.

    A run is single-threaded. Control events (window closes, fault
    activation/revert) sit in a heap ordered by ``(time, insertion seq)``;
    arrivals between two control events are handed to the compiled kernel.
    At equal timestamps control events go first.
    """

    def __init__(self, topology: Topology, seed: int = 0, window_s: float = 10.0, trace=False):
        if len(topology.services) > MAX_SERVICES:
            raise ChaoslabError(f"at most {MAX_SERVICES} services are supported")
        self.topology = topology
        self.seed = seed
        self.window_ms = float(window_s) * 1000.0
        self.clock = 0.0
        self.seeds = {c: derive_seed(seed, c) for c in ("arrivals", "jitter", "faults", "routing")}
        self._arrival_rng = np.random.Generator(np.random.PCG64(self.seeds["arrivals"]))
        self._pick_rng = random.Random(self.seeds["faults"])
        self._seq = itertools.count()
        self._events: list[SimEvent] = []
        self.log: list[SimEvent] = []
        self.sink = MetricSink(window_s)
        self.fault_rows: dict[str, int] = {}
        self._faults = {}
        self.active_faults: list[str] = []
        self._salt_rows: dict[str, int] = {}

        self.service_index = {s.id: i for i, s in enumerate(topology.services)}
        self.region_index = {r.id: i for i, r in enumerate(topology.regions)}
        self._build_tables()
        self._build_state(trace)

        self.region_weights = [r.routing_weight for r in topology.regions]
        self.evacuated = [r.evacuated for r in topology.regions]
        self._region_salts = [region_salt(self.seeds["routing"], r.id) for r in topology.regions]
        self._population = np.arange(topology.traffic.population)
        self.user_region = route_table(self._population, self.region_weights, self.evacuated, self._region_salts)
        self.user_group = np.zeros(topology.traffic.population, dtype=np.int64)

        self._window = 0
        self._rid0 = 0
        self._cum_arrivals = 0
        self._cum_completions = 0
        self._deaths_seen = 0
        self._open_window(0)

    # ------------------------------------------------------------------
    # construction

    def _build_tables(self):
        topo = self.topology
        S, R = len(topo.services), len(topo.regions)
        si = self.service_index
        edges = list(topo.edges)
        self.edge_index = {(e.caller, e.callee): i for i, e in enumerate(edges)}

        child_start = np.zeros(S + 1, dtype=np.int64)
        callee, via = [], []
        for i, s in enumerate(topo.services):
            for j, e in enumerate(edges):
                if e.caller == s.id:
                    callee.append(si[e.callee])
                    via.append(j)
            child_start[i + 1] = len(callee)
        fronts = np.zeros((S, S), dtype=np.bool_)
        for e in edges:
            fronts[si[e.caller], si[e.callee]] = True

        g = topo.graph()
        nominal = {}
        for sid in reversed(list(nx.topological_sort(g))):
            nominal[sid] = topo.service(sid).base_latency + sum(nominal[e.callee] for e in topo.children(sid))

        # upper bound on calls one request can make (paths from the entry, doubled for bypasses)
        paths = {}
        for sid in reversed(list(nx.topological_sort(g))):
            paths[sid] = 1 + sum(paths[e.callee] for e in topo.children(sid))
        self.max_calls = 2 * paths[topo.entry_service] + 2
        if 2 * topo.max_call_depth() + 2 > K.MAX_DEPTH:
            raise ChaoslabError(f"call chains deeper than {K.MAX_DEPTH // 2 - 1} are not supported")
        self.stack = K.new_stack()

        kmax = max(s.instances_per_region for s in topo.services)
        inst_table = np.full((S, R, kmax), -1, dtype=np.int64)
        inst_count = np.zeros((S, R), dtype=np.int64)
        self.instance_ids = []
        self.instance_service = []
        for i, s in enumerate(topo.services):
            for r, reg in enumerate(topo.regions):
                for k in range(s.instances_per_region):
                    inst_table[i, r, k] = len(self.instance_ids)
                    self.instance_ids.append(f"{s.id}@{reg.id}#{k}")
                    self.instance_service.append(i)
                inst_count[i, r] = s.instances_per_region
        self.instance_index = {name: i for i, name in enumerate(self.instance_ids)}

        cache_services = [s.id for s in topo.services if s.cache is not None]
        self.cache_slots = {sid: k for k, sid in enumerate(cache_services)}
        fb = {"none": K.FB_NONE, "default-value": K.FB_DEFAULT, "bypass-to": K.FB_BYPASS}

        self.tables = K.Tables(
            entry=si[topo.entry_service],
            window_ms=self.window_ms,
            child_start=child_start,
            child_callee=np.array(callee, dtype=np.int64),
            child_edge=np.array(via, dtype=np.int64),
            edge_required=np.array([e.required for e in edges], dtype=np.bool_),
            fronts=fronts,
            base=np.array([s.base_latency for s in topo.services], dtype=np.float64),
            cap=np.array([s.capacity_per_instance for s in topo.services], dtype=np.float64),
            hold=np.array([1000.0 / s.capacity_per_instance for s in topo.services], dtype=np.float64),
            nominal=np.array([nominal[s.id] for s in topo.services], dtype=np.float64),
            queue_max=np.array([-1 if s.unbounded else s.queue_max for s in topo.services], dtype=np.int64),
            mem_limit=np.array([s.memory_limit for s in topo.services], dtype=np.int64),
            critical=np.array([s.criticality == "critical" for s in topo.services], dtype=np.bool_),
            fallback=np.array([fb[s.fallback.kind] for s in topo.services], dtype=np.int64),
            bypass=np.array(
                [si[s.fallback.target] if s.fallback.kind == "bypass-to" else 0 for s in topo.services],
                dtype=np.int64,
            ),
            cache_slot=np.array([self.cache_slots.get(s.id, -1) for s in topo.services], dtype=np.int64),
            ttl=np.array([s.cache.ttl * 1000.0 if s.cache else 0.0 for s in topo.services], dtype=np.float64),
            cache_errors=np.array([bool(s.cache and s.cache.cache_errors) for s in topo.services], dtype=np.bool_),
            jitter=np.array([s.jitter for s in topo.services], dtype=np.float64),
            inst_table=inst_table,
            inst_count=inst_count,
        )

    def _build_state(self, trace):
        topo = self.topology
        I, R = len(self.instance_ids), len(topo.regions)
        S = len(topo.services)
        qcap = max(min(s.queue_max or s.memory_limit, s.memory_limit) for s in topo.services) + 3
        n_cache = max(len(self.cache_slots), 1)
        pop = topo.traffic.population
        self.state = K.State(
            alive=np.ones(I, dtype=np.bool_),
            busy=np.zeros(I),
            death_time=np.full(I, np.inf),
            rr=np.zeros((S, R), dtype=np.int64),
            q_start=np.zeros((I, qcap)),
            q_rid=np.zeros((I, qcap), dtype=np.int64),
            q_head=np.zeros(I, dtype=np.int64),
            q_len=np.zeros(I, dtype=np.int64),
            cache_exp=np.full((n_cache, R, topo.traffic.catalog), -np.inf),
            cache_ok=np.zeros((n_cache, R, topo.traffic.catalog), dtype=np.bool_),
            region_down=np.zeros(R, dtype=np.bool_),
            rng=np.array([self.seeds["jitter"], self.seeds["faults"]], dtype=np.uint64),
            req_cw=np.zeros(0, dtype=np.int64),
            req_status=np.zeros(0, dtype=np.int64),
            req_group=np.zeros(0, dtype=np.int64),
            pending=np.zeros(I, dtype=np.int64),
            pending_n=np.zeros(1, dtype=np.int64),
            death_inst=np.zeros(I, dtype=np.int64),
            death_time_log=np.zeros(I),
            death_n=np.zeros(1, dtype=np.int64),
        )
        self.faults = K.Faults(
            active=np.zeros(MAX_FAULTS, dtype=np.int64),
            kind=np.zeros(MAX_FAULTS, dtype=np.int64),
            edge=np.full(MAX_FAULTS, -1, dtype=np.int64),
            service=np.full(MAX_FAULTS, -1, dtype=np.int64),
            extra=np.zeros(MAX_FAULTS),
            jitter=np.zeros(MAX_FAULTS),
            prob=np.zeros(MAX_FAULTS),
            scope_all=np.ones(MAX_FAULTS, dtype=np.int64),
            salt=np.zeros(MAX_FAULTS, dtype=np.int64),
            thresh=np.zeros(MAX_FAULTS, dtype=np.int64),
            fired=np.zeros((MAX_FAULTS, len(GROUPS)), dtype=np.int64),
            buckets=np.zeros((1, pop), dtype=np.int64),
        )
        self.metrics = K.Metrics(
            bnd=np.zeros((2 * COMPLETION_HORIZON, len(GROUPS), 4), dtype=np.int64),
            calls=np.zeros(S, dtype=np.int64),
            errors=np.zeros(S, dtype=np.int64),
            fallbacks=np.zeros(S, dtype=np.int64),
            busy=np.zeros(S),
            max_queue=np.zeros(S, dtype=np.int64),
            max_mem=np.zeros(S, dtype=np.int64),
            lat_val=np.zeros(1 << 16),
            lat_svc=np.zeros(1 << 16, dtype=np.int64),
            lat_n=np.zeros(1, dtype=np.int64),
        )
        self.trace = K.new_trace(trace)

    # ------------------------------------------------------------------
    # events

    def schedule(self, time_ms, kind, **payload):
        if kind not in EVENT_KINDS:
            raise ValueError(f"unknown event kind {kind!r}")
        ev = SimEvent(float(time_ms), next(self._seq), kind, payload)
        heapq.heappush(self._events, ev)
        return ev

    def _open_window(self, w):
        if w > 0:
            self._rid0 += len(self._arrivals)
        self._window = w
        t0, t1 = w * self.window_ms, (w + 1) * self.window_ms
        self._arrivals = generate_arrivals(t0, t1, self.topology.traffic, self._arrival_rng)
        self._next = 0
        n = len(self._arrivals)
        st = self.state
        need = self._rid0 + n
        if st.req_status.shape[0] < need:
            self.state = st._replace(
                req_cw=_grow(st.req_cw, need),
                req_status=_grow(st.req_status, need, fill=-1),
                req_group=_grow(st.req_group, need),
            )
        if w + COMPLETION_HORIZON >= self.metrics.bnd.shape[0]:
            self.metrics = self.metrics._replace(bnd=_grow(self.metrics.bnd, w + 2 * COMPLETION_HORIZON))
        self.schedule(t1, "window-close", window=w)

    def _drain(self, bound, inclusive):
        """Feed arrivals with time < bound (<= when inclusive) to the kernel."""
        arr = self._arrivals
        stop = int(np.searchsorted(arr.times, bound, side="right" if inclusive else "left"))
        while self._next < stop:
            reached = K.process_arrivals(
                arr.times, arr.users, arr.keys, self._next, stop, self._rid0,
                self.user_region, self.user_group, self.max_calls, self._window, -1, -1, True,
                self.tables, self.state, self.faults, self.metrics, self.trace, self.stack,
            )[0]
            self._next = reached
            if reached < stop:
                self._grow_buffers()
        self._collect_deaths()

    def _grow_buffers(self):
        mx = self.metrics
        if mx.lat_n[0] + self.max_calls > mx.lat_val.shape[0]:
            self.metrics = mx._replace(lat_val=_grow(mx.lat_val, 2 * mx.lat_val.shape[0]),
                                       lat_svc=_grow(mx.lat_svc, 2 * mx.lat_svc.shape[0]))
        tr = self.trace
        grown = {}
        for on, prefix in zip(tr.on, ("call_", "fire_", "req_")):
            size = getattr(tr, prefix + "f").shape[0]
            if on and getattr(tr, prefix + "n")[0] + self.max_calls + 1 > size:
                for part in ("f", "i"):
                    grown[prefix + part] = _grow(getattr(tr, prefix + part), 2 * size)
        if grown:
            self.trace = tr._replace(**grown)

    def _collect_deaths(self):
        st = self.state
        while self._deaths_seen < st.death_n[0]:
            k = self._deaths_seen
            inst = int(st.death_inst[k])
            ev = SimEvent(float(st.death_time_log[k]), next(self._seq), "instance-death",
                          {"instance": self.instance_ids[inst]})
            self.log.append(ev)
            log.debug("instance %s died at %.1f ms", self.instance_ids[inst], ev.time)
            self._deaths_seen += 1

    def run_until(self, t_end):
        """Process every event with time <= ``t_end``; returns ``self``."""
        if t_end < self.clock:
            raise ValueError(f"t_end {t_end} is before the clock {self.clock}")
        while self._events and self._events[0].time <= t_end:
            ev = heapq.heappop(self._events)
            self._drain(ev.time, inclusive=False)
            self.clock = ev.time
            self._handle(ev)
        self._drain(t_end, inclusive=True)
        self.clock = float(t_end)
        return self

    def _handle(self, ev):
        self.log.append(ev)
        if ev.kind == "window-close":
            self._close_window(ev.payload["window"])
            self._open_window(ev.payload["window"] + 1)
        elif ev.kind in ("fault-activate", "fault-revert"):
            fault = self._faults[ev.payload["fault"]]
            if ev.kind == "fault-activate":
                fault.activate(self, ev.time)
                self.active_faults.append(fault.name)
            elif fault.name in self.active_faults:
                fault.deactivate(self, ev.time)
                self.active_faults.remove(fault.name)
            self._collect_deaths()

    def _close_window(self, w):
        mx = self.metrics
        counts = mx.bnd[w].copy()
        self._cum_arrivals += int(counts[:, K.K_ARRIVALS].sum())
        self._cum_completions += int(counts[:, 1:].sum())
        n = int(mx.lat_n[0])
        lat, svc = mx.lat_val[:n], mx.lat_svc[:n]
        alive = np.bincount(np.array(self.instance_service)[self.state.alive], minlength=len(self.topology.services))
        services = {}
        for i, s in enumerate(self.topology.services):
            calls = int(mx.calls[i])
            mine = np.sort(lat[svc == i])
            services[s.id] = {
                "calls": calls,
                "latency_p99": float(mine[int(np.ceil(0.99 * len(mine))) - 1]) if len(mine) else 0.0,
                "busy_fraction": float(mx.busy[i]) / (alive[i] * self.window_ms) if alive[i] else 0.0,
                "queue_depth": int(mx.max_queue[i]),
                "memory_proxy": int(mx.max_mem[i]),
                "fallback_rate": mx.fallbacks[i] / calls if calls else 0.0,
                "error_rate": mx.errors[i] / calls if calls else 0.0,
            }
        for arr in (mx.calls, mx.errors, mx.fallbacks, mx.busy, mx.max_queue, mx.max_mem):
            arr[:] = 0
        mx.lat_n[0] = 0
        self.sink.close_window(w, counts, services, self._cum_arrivals - self._cum_completions)

    # ------------------------------------------------------------------
    # faults and routing

    def register_fault(self, compiled):
        """Give a compiled fault a kernel row and queue its activate/revert events."""
        if compiled.name in self._faults:
            raise ValueError(f"fault {compiled.name!r} already installed")
        row = len(self.fault_rows)
        if row >= MAX_FAULTS:
            raise ChaoslabError(f"at most {MAX_FAULTS} faults per run")
        self.fault_rows[compiled.name] = row
        self._faults[compiled.name] = compiled
        compiled.install(self, row)
        start, end = compiled.window
        self.schedule(start, "fault-activate", fault=compiled.name)
        self.schedule(end, "fault-revert", fault=compiled.name)
        return row

    def revert_all(self):
        """Deactivate every installed fault now and drop pending fault events."""
        for name in list(self.active_faults):
            self._faults[name].deactivate(self, self.clock)
            self.log.append(SimEvent(self.clock, next(self._seq), "fault-revert", {"fault": name}))
        self.active_faults.clear()
        self._events = [e for e in self._events if e.kind not in ("fault-activate", "fault-revert")]
        heapq.heapify(self._events)

    def salt_row(self, salt):
        """Row of the bucket table holding ``bucket(user, salt)`` for every user."""
        if salt not in self._salt_rows:
            row = len(self._salt_rows)
            buckets = self.faults.buckets
            if row >= buckets.shape[0]:
                grown = np.zeros((row + 1, buckets.shape[1]), dtype=np.int64)
                grown[: buckets.shape[0]] = buckets
                buckets = grown
            buckets[row] = bucket_array(self._population, salt)
            self.faults = self.faults._replace(buckets=buckets)
            self._salt_rows[salt] = row
        return self._salt_rows[salt]

    def set_region_down(self, region, down):
        self.state.region_down[self.region_index[region]] = down

    def set_evacuated(self, region, evacuated):
        i = self.region_index[region]
        flags = list(self.evacuated)
        flags[i] = evacuated
        table = route_table(self._population, self.region_weights, flags, self._region_salts)
        self.evacuated = flags
        self.user_region = table

    def route_request(self, user):
        """Region id serving ``user`` under the current weights/evacuations."""
        live = [w > 0 and not ev for w, ev in zip(self.region_weights, self.evacuated)]
        if not any(live):
            raise AllRegionsDownError("every region is evacuated or has zero routing weight")
        return self.topology.regions[int(self.user_region[user])].id

    def set_groups(self, group_codes):
        """Per-user group code array (0 unassigned, 1 control, 2 experiment)."""
        codes = np.asarray(group_codes, dtype=np.int64)
        if codes.shape != self.user_group.shape:
            raise ValueError("group array must cover the whole population")
        self.user_group = codes

    def kill(self, instance, t=None):
        i = self.instance_index[instance] if isinstance(instance, str) else int(instance)
        K.kill_instance(i, self.clock if t is None else t, self._window, self.state, self.metrics)
        self._collect_deaths()

    def alive_instances(self, service=None):
        sid = None if service is None else self.service_index[service]
        return [
            name for i, name in enumerate(self.instance_ids)
            if self.state.alive[i] and (sid is None or self.instance_service[i] == sid)
        ]

    def pick_victim(self, service):
        candidates = self.alive_instances(service)
        return self._pick_rng.choice(candidates) if candidates else None

    # ------------------------------------------------------------------
    # single calls

    def process_call(self, service, request: Request):
        """Run one request through ``service`` (and its dependencies) now.

        This touches queues, caches and per-window service metrics exactly as
        a simulated arrival would, but does not count at the system boundary.
        """
        if service not in self.service_index:
            raise KeyError(service)
        t = self.clock if request.time is None else float(request.time)
        region = self.region_index[request.region] if request.region else int(self.user_region[request.user])
        self._grow_buffers()
        _, status, reason, latency, mask = K.process_arrivals(
            np.array([t]), np.array([request.user]), np.array([request.key]), 0, 1, -1,
            self.user_region, self.user_group, self.max_calls, self._window,
            self.service_index[service], region, False,
            self.tables, self.state, self.faults, self.metrics, self.trace, self.stack,
        )
        self._collect_deaths()
        return Outcome(_STATUS[status], float(latency), K.REASONS[reason], self.degraded_labels(mask))

    def degraded_labels(self, mask):
        labels = []
        for i, s in enumerate(self.topology.services):
            if mask >> i & 1:
                labels.append(s.fallback.label or s.id)
        return tuple(labels)

    # ------------------------------------------------------------------
    # inspection

    def trace_records(self, kind):
        """Trace columns as a dict of arrays; ``kind`` is calls, firings or requests."""
        prefix, fcols, icols = {
            "calls": ("call_", K.CALL_F, K.CALL_I),
            "firings": ("fire_", K.FIRE_F, K.FIRE_I),
            "requests": ("req_", K.REQ_F, K.REQ_I),
        }[kind]
        tr = self.trace
        n = int(getattr(tr, prefix + "n")[0])
        out = {c: getattr(tr, prefix + "f")[:n, j].copy() for j, c in enumerate(fcols)}
        out.update({c: getattr(tr, prefix + "i")[:n, j].copy() for j, c in enumerate(icols)})
        return out

    def fingerprint(self):
        """Digest of the complete simulation state and every emitted metric."""
        h = hashlib.sha256()
        h.update(repr(self.clock).encode())
        for group in (self.state, self.metrics, self.faults):
            for name in group._fields:
                h.update(name.encode())
                h.update(np.ascontiguousarray(getattr(group, name)).tobytes())
        h.update(self.user_region.tobytes())
        h.update(self.sink.to_csv_text().encode())
        return h.hexdigest()


def build_world(topology, seed=0, window_s=10.0, trace=False):
    """New world; ``trace`` is True, False or a subset of calls, firings, requests."""
    return WorldState(topology, seed=seed, window_s=window_s, trace=trace)


def run_until(world, t_end):
    return world.run_until(t_end)


def route_request(user, world):
    return world.route_request(user)


def process_call(service, request, world):
    return world.process_call(service, request)
