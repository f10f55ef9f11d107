"""Control/experiment runs and the attempt to refute a steady-state hypothesis.

A run splits users into two equal hash slices, injects the configured faults
into the experiment slice only, and compares per-capita windowed SPS of the
two slices with a seeded permutation test. Faults that hit everyone (region
outages, instance terminations) have no control slice; those runs are judged
against a paired no-fault reference run instead.
"""

from __future__ import annotations

import copy
import datetime as dt
import json
import logging
import math
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from chaoslab.errors import ConfigError, IndeterminateControlError, ReplayMismatchError, SchemaError
from chaoslab.faults import FaultSpec, UserScope, compile_fault
from chaoslab.hashing import BUCKETS, bucket_array, derive_seed, threshold
from chaoslab.metrics import (
    GROUP_CODES,
    GROUPS,
    GUARDRAIL_METRICS,
    BaselineModel,
    Guardrail,
    MetricSeries,
    baseline_deviation,
    guardrail_check,
)
from chaoslab.sim.topology import FIXTURES, fixture_doc, load_topology
from chaoslab.sim.world import build_world

log = logging.getLogger(__name__)

STEADY_STATE_METRICS = ("sps", "starts", "successes")
ABORT_POLICIES = ("on-breach", "never")
MIN_WINDOWS = 20


# ---------------------------------------------------------------------------
# groups


@dataclass(frozen=True)
class GroupAssignment:
    """Deterministic split of the user population into two equal groups.

    The experiment group is exactly the fault scope: users whose bucket under
    ``salt`` lies below ``fraction`` of the bucket space. The control group is
    the next equally many users in (bucket, user id) order, so both groups
    have the same size; at ``fraction = 0.5`` it is simply everyone else.
    """

    salt: str
    fraction: float
    population: int

    def __post_init__(self):
        if not 0 < self.fraction <= 0.5:
            raise SchemaError("group fraction must satisfy 0 < f <= 0.5", "group.fraction")

    def codes(self):
        """Group code (0 unassigned, 1 control, 2 experiment) for every user."""
        b = bucket_array(np.arange(self.population), self.salt)
        out = np.zeros(self.population, dtype=np.int64)
        experiment = b < threshold(self.fraction)
        n = int(np.count_nonzero(experiment))
        if threshold(2 * self.fraction) >= BUCKETS:
            out[:] = GROUP_CODES["control"]  # f = 0.5: the control half is everyone else
        else:
            order = np.lexsort((np.arange(self.population), b))  # by bucket, ties by user id
            out[order[n:2 * n]] = GROUP_CODES["control"]
        out[experiment] = GROUP_CODES["experiment"]
        return out

    def group_of(self, user):
        return GROUPS[int(self.codes()[user])]

    def sizes(self):
        counts = np.bincount(self.codes(), minlength=3)
        return {"unassigned": int(counts[0]), "control": int(counts[1]), "experiment": int(counts[2])}


def assign_groups(population, fraction, salt):
    return GroupAssignment(str(salt), float(fraction), int(population))


# ---------------------------------------------------------------------------
# spec


def _apply_patch(doc, patch):
    """Copy of a topology document with per-service / traffic overrides applied."""
    doc = copy.deepcopy(doc)
    for sid, changes in (patch.get("services") or {}).items():
        for s in doc["services"]:
            if s.get("id") == sid:
                s.update(changes)
                break
        else:
            raise SchemaError(f"patch names unknown service {sid!r}", f"topology_patch.services.{sid}")
    if "traffic" in patch:
        doc["traffic"] = {**doc.get("traffic", {}), **patch["traffic"]}
    unknown = set(patch) - {"services", "traffic"}
    if unknown:
        raise SchemaError("unknown patch section", f"topology_patch.{sorted(unknown)[0]}")
    return doc


@dataclass(frozen=True)
class ExperimentSpec:
    name: str
    topology: object  # fixture name, path, or inline document
    seed: int = 0
    metric: str = "sps"
    faults: tuple = ()
    fraction: float = 0.05
    salt: str = "experiment"
    duration: float = 3600.0  # simulated seconds
    delta: float = 0.01
    alpha: float = 0.05
    permutations: int = 999
    guardrails: tuple = ()
    abort_policy: str = "on-breach"
    window: float = 10.0  # seconds
    baseline_band: float = 0.02
    transient: float = 60.0  # seconds excluded after each physical fault edge
    topology_patch: dict = field(default_factory=dict, compare=False)
    base_dir: str | None = field(default=None, compare=False)

    # -- validation -----------------------------------------------------

    def check(self):
        """Raise a :class:`ConfigError` naming the first invalid field."""
        if not isinstance(self.name, str) or not self.name:
            raise SchemaError("must be a non-empty string", "name")
        if isinstance(self.seed, bool) or not isinstance(self.seed, int) or self.seed < 0:
            raise SchemaError("must be a non-negative integer", "seed")
        if self.metric not in STEADY_STATE_METRICS:
            raise SchemaError(f"steady-state metric must be one of {STEADY_STATE_METRICS}", "metric")
        if not 0 < self.fraction <= 0.5:
            raise SchemaError("must satisfy 0 < f <= 0.5", "group.fraction")
        if not 0 < self.alpha < 1:
            raise SchemaError("must satisfy 0 < alpha < 1", "alpha")
        if not self.delta >= 0:
            raise SchemaError("must be >= 0", "delta")
        if isinstance(self.permutations, bool) or not isinstance(self.permutations, int) or self.permutations < 99:
            raise SchemaError("must be an integer >= 99", "permutations")
        if not self.window > 0:
            raise SchemaError("must be > 0", "window")
        if not (self.duration > 0 and math.isfinite(self.duration)):
            raise SchemaError("must be > 0", "duration")
        if self.duration / self.window < MIN_WINDOWS:
            raise SchemaError(f"run must span at least {MIN_WINDOWS} windows", "duration")
        if self.abort_policy not in ABORT_POLICIES:
            raise SchemaError(f"must be one of {ABORT_POLICIES}", "abort_policy")
        if not self.baseline_band > 0:
            raise SchemaError("must be > 0", "baseline_band")
        if self.transient < 0:
            raise SchemaError("must be >= 0", "transient")
        topo = self.load_topology()
        services = set(topo.service_ids())
        for i, g in enumerate(self.guardrails):
            if g.metric not in GUARDRAIL_METRICS:
                raise SchemaError(f"unknown guardrail metric {g.metric!r}", f"guardrails[{i}].metric")
            if g.service is None and g.metric not in ("fallback_rate", "error_rate"):
                raise SchemaError(f"{g.metric} needs a service", f"guardrails[{i}].service")
            if g.service is not None and g.service not in services:
                raise SchemaError(f"unknown service {g.service!r}", f"guardrails[{i}].service")
        for i, f in enumerate(self.faults):
            if f.scope.mode == "fraction":
                if f.scope.salt != self.salt:
                    raise SchemaError("fault scope salt must equal the group salt", f"faults[{i}].scope.salt")
                if f.scope.fraction != self.fraction:
                    raise SchemaError("fault scope fraction must equal the group fraction",
                                      f"faults[{i}].scope.fraction")
            try:
                compile_fault(f, topo)
            except ConfigError as exc:
                raise type(exc)(str(exc).split(": ", 1)[-1], f"faults[{i}].{exc.path}") from None
        return topo

    @property
    def physical(self):
        """True when some fault hits every user, leaving no clean control slice."""
        return any(f.scope.mode == "all" for f in self.faults)

    def topology_doc(self):
        ref = self.topology
        if isinstance(ref, dict):
            doc = ref
        elif isinstance(ref, str) and ref in FIXTURES:
            doc = fixture_doc(ref)
        elif isinstance(ref, str):
            path = Path(ref)
            if not path.is_absolute() and self.base_dir:
                path = Path(self.base_dir) / path
            try:
                doc = json.loads(path.read_text())
            except FileNotFoundError:
                raise SchemaError(f"no fixture or file named {ref!r}", "topology") from None
            except json.JSONDecodeError as exc:
                raise SchemaError(f"topology file does not parse: {exc}", "topology") from None
        else:
            raise SchemaError("must be a fixture name, a path or an inline document", "topology")
        return _apply_patch(doc, self.topology_patch) if self.topology_patch else doc

    def load_topology(self):
        return load_topology(self.topology_doc())

    # -- overrides ------------------------------------------------------

    def with_overrides(self, seed=None, duration=None, alpha=None, delta=None, fraction=None):
        spec = self
        if seed is not None:
            spec = replace(spec, seed=int(seed))
        if duration is not None:
            spec = replace(spec, duration=float(duration))
        if alpha is not None:
            spec = replace(spec, alpha=float(alpha))
        if delta is not None:
            spec = replace(spec, delta=float(delta))
        if fraction is not None:
            # keep fault scopes coherent with the group
            faults = tuple(
                replace(f, scope=UserScope.slice(fraction, f.scope.salt)) if f.scope.mode == "fraction" else f
                for f in spec.faults
            )
            spec = replace(spec, fraction=float(fraction), faults=faults)
        return spec

    # -- encoding -------------------------------------------------------

    def to_dict(self, inline_topology=False):
        d = {
            "name": self.name,
            "topology": self.topology_doc() if inline_topology else self.topology,
            "seed": self.seed,
            "metric": self.metric,
            "faults": [f.to_dict() for f in self.faults],
            "group": {"fraction": self.fraction, "salt": self.salt},
            "duration": self.duration,
            "delta": self.delta,
            "alpha": self.alpha,
            "permutations": self.permutations,
            "guardrails": [g.to_dict() for g in self.guardrails],
            "abort_policy": self.abort_policy,
            "window": self.window,
            "baseline_band": self.baseline_band,
            "transient": self.transient,
        }
        if self.topology_patch and not inline_topology:
            d["topology_patch"] = self.topology_patch
        return d

    @classmethod
    def from_dict(cls, d, base_dir=None):
        if not isinstance(d, dict):
            raise SchemaError("experiment document must be an object")
        known = {"name", "topology", "seed", "metric", "faults", "group", "duration", "delta", "alpha",
                 "permutations", "guardrails", "abort_policy", "window", "baseline_band", "transient",
                 "topology_patch"}
        unknown = set(d) - known
        if unknown:
            raise SchemaError("unknown field", sorted(unknown)[0])
        for key in ("name", "topology"):
            if key not in d:
                raise SchemaError("missing required field", key)
        group = d.get("group", {})
        if not isinstance(group, dict):
            raise SchemaError("expected object", "group")
        faults = d.get("faults", [])
        if not isinstance(faults, list):
            raise SchemaError("expected a list", "faults")
        guardrails = []
        for i, g in enumerate(d.get("guardrails", [])):
            try:
                guardrails.append(Guardrail.from_dict(g))
            except (KeyError, TypeError, ValueError) as exc:
                raise SchemaError(str(exc), f"guardrails[{i}]") from None

        def num(key, default, kind=float):
            value = d.get(key, default)
            if isinstance(value, bool) or not isinstance(value, (int, float)):
                raise SchemaError("expected a number", key)
            if kind is int and value != int(value):
                raise SchemaError("expected an integer", key)
            return kind(value)

        fraction = group.get("fraction", 0.05)
        if isinstance(fraction, bool) or not isinstance(fraction, (int, float)):
            raise SchemaError("expected a number", "group.fraction")
        patch = d.get("topology_patch", {})
        if not isinstance(patch, dict):
            raise SchemaError("expected object", "topology_patch")
        return cls(
            name=d["name"],
            topology=d["topology"],
            seed=num("seed", 0, int),
            metric=d.get("metric", "sps"),
            faults=tuple(FaultSpec.from_dict(f, f"faults[{i}]") for i, f in enumerate(faults)),
            fraction=float(fraction),
            salt=str(group.get("salt", "experiment")),
            duration=num("duration", 3600.0),
            delta=num("delta", 0.01),
            alpha=num("alpha", 0.05),
            permutations=num("permutations", 999, int),
            guardrails=tuple(guardrails),
            abort_policy=d.get("abort_policy", "on-breach"),
            window=num("window", 10.0),
            baseline_band=num("baseline_band", 0.02),
            transient=num("transient", 60.0),
            topology_patch=patch,
            base_dir=str(base_dir) if base_dir else None,
        )


def load_spec(path):
    """Parse and validate an experiment document from ``path``."""
    path = Path(path)
    try:
        doc = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise SchemaError(f"document does not parse: {exc}") from None
    spec = ExperimentSpec.from_dict(doc, base_dir=path.parent)
    spec.check()
    return spec


def fixture_spec(name):
    """A shipped experiment spec by name (see ``chaoslab/fixtures/experiments``)."""
    from importlib import resources

    text = resources.files("chaoslab.fixtures").joinpath("experiments", f"{name}.json").read_text()
    return ExperimentSpec.from_dict(json.loads(text))


# ---------------------------------------------------------------------------
# hypothesis evaluation


@dataclass(frozen=True)
class Verdict:
    status: str  # upheld | refuted | aborted
    effect: float | None
    p_value: float | None
    mode: str = "groups"  # groups | baseline
    windows: int = 0
    mean_control: float | None = None
    mean_experiment: float | None = None
    flagged: tuple = ()  # baseline mode: starts of windows outside the band
    abort: dict | None = None

    def to_dict(self):
        return {
            "status": self.status,
            "effect": self.effect,
            "p_value": self.p_value,
            "mode": self.mode,
            "windows": self.windows,
            "mean_control": self.mean_control,
            "mean_experiment": self.mean_experiment,
            "flagged": list(self.flagged),
            "abort": self.abort,
        }

    @classmethod
    def from_dict(cls, d):
        return cls(d["status"], d["effect"], d["p_value"], d.get("mode", "groups"), d.get("windows", 0),
                   d.get("mean_control"), d.get("mean_experiment"), tuple(d.get("flagged", ())), d.get("abort"))


def _paired(control: MetricSeries, experiment: MetricSeries):
    c, e = control.values(), experiment.values()
    if len(c) != len(e) or not np.array_equal(control.starts(), experiment.starts()):
        raise ValueError("control and experiment series must share one window grid")
    return c, e


def relative_effect(control: MetricSeries, experiment: MetricSeries):
    c, e = _paired(control, experiment)
    mean_c = float(c.mean()) if len(c) else 0.0
    if mean_c == 0:
        raise IndeterminateControlError("control group has zero mean steady-state value")
    return (float(e.mean()) - mean_c) / mean_c


def permutation_p_value(diffs, permutations, seed):
    """Two-sided sign-flip permutation p-value for the mean of paired differences.

    Each shuffle swaps the control/experiment labels within a random subset
    of windows, which flips the sign of those windows' differences.
    """
    diffs = np.asarray(diffs, dtype=float)
    observed = abs(diffs.mean())
    rng = np.random.default_rng(seed)
    signs = rng.integers(0, 2, size=(permutations, len(diffs)), dtype=np.int8) * 2 - 1
    permuted = np.abs(signs @ diffs) / len(diffs)
    # guard against float noise when a shuffle reproduces the observed labels
    count = int(np.count_nonzero(permuted >= observed * (1 - 1e-12)))
    return (count + 1) / (permutations + 1)


def evaluate_hypothesis(control: MetricSeries, experiment: MetricSeries, delta, alpha, permutations, seed):
    """Verdict comparing per-capita steady-state series of the two groups.

    Refuted only when the difference is both statistically detectable
    (``p <= alpha``) and practically relevant (``|effect| > delta``).
    """
    c, e = _paired(control, experiment)
    if len(c) < MIN_WINDOWS:
        raise ValueError(f"need at least {MIN_WINDOWS} windows, got {len(c)}")
    effect = relative_effect(control, experiment)
    p = permutation_p_value(e - c, permutations, seed)
    status = "refuted" if p <= alpha and abs(effect) > delta else "upheld"
    return Verdict(status, effect, p, "groups", len(c), float(c.mean()), float(e.mean()))


def should_abort(breaches, policy):
    """Whether a run must stop now given the guardrail breaches seen so far."""
    if policy not in ABORT_POLICIES:
        raise ValueError(f"unknown abort policy {policy!r}")
    return policy == "on-breach" and bool(breaches)


# ---------------------------------------------------------------------------
# running


@dataclass
class ExperimentReport:
    spec: dict  # snapshot with the topology inlined
    seeds: dict
    topology_version: int
    groups: dict
    series: dict  # name -> MetricSeries
    timeline: list
    breaches: list
    verdict: Verdict
    deaths: list = field(default_factory=list)  # instance deaths: {"time": ms, "instance": id}
    csv: str = field(repr=False, default="")
    produced_at: str = ""

    def to_dict(self):
        return {
            "spec": self.spec,
            "seeds": self.seeds,
            "topology_version": self.topology_version,
            "groups": self.groups,
            "series": {k: v.to_dict() for k, v in self.series.items()},
            "timeline": self.timeline,
            "breaches": self.breaches,
            "verdict": self.verdict.to_dict(),
            "deaths": self.deaths,
            "produced_at": self.produced_at,
        }

    def to_json(self):
        return json.dumps(self.to_dict(), indent=2, sort_keys=True, allow_nan=False)

    @classmethod
    def from_dict(cls, d, csv=""):
        return cls(
            spec=d["spec"],
            seeds=d["seeds"],
            topology_version=d["topology_version"],
            groups=d["groups"],
            series={k: MetricSeries.from_dict(v) for k, v in d["series"].items()},
            timeline=d["timeline"],
            breaches=d["breaches"],
            verdict=Verdict.from_dict(d["verdict"]),
            deaths=d.get("deaths", []),
            csv=csv,
            produced_at=d.get("produced_at", ""),
        )

    def write(self, out_dir, stem=None):
        """Write ``<stem>.json`` and ``<stem>.csv`` into ``out_dir``; returns both paths."""
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        stem = stem or self.spec["name"]
        doc, table = out / f"{stem}.json", out / f"{stem}.csv"
        doc.write_text(self.to_json() + "\n")
        table.write_text(self.csv)
        return doc, table


def _per_capita(series: MetricSeries, size, metric):
    factor = 1.0 / size if size else 0.0
    if metric != "sps":
        factor /= series.window
    return series.scaled(factor, metric=f"{metric}_per_capita")


def _run_world(spec, topo, faults, groups, guardrails, policy):
    """Run one world window by window; returns (world, timeline, breaches, aborted_at)."""
    world = build_world(topo, seed=spec.seed, window_s=spec.window)
    if groups is not None:
        world.set_groups(groups)
    for i, f in enumerate(faults):
        world.register_fault(compile_fault(f, topo, name=f"{i}:{f.label}"))
    n_windows = int(round(spec.duration / spec.window))
    timeline, breaches, aborted_at = [], [], None
    seen = set()
    for w in range(n_windows):
        world.run_until((w + 1) * world.window_ms)
        if not guardrails:
            continue
        entry = {"window": w * spec.window, "values": {}}
        for g in guardrails:
            entry["values"][g.series_id] = world.sink.series(g.series_id).samples[-1][1]
        timeline.append(entry)
        for b in guardrail_check(guardrails, world.sink):
            key = (b.metric, b.service)
            if key not in seen:
                seen.add(key)
                breaches.append(b.to_dict() | {"detected_at": (w + 1) * spec.window})
                log.warning("guardrail breach: %s on %s from window %.0fs", b.metric, b.service, b.first_window)
        if should_abort(breaches, policy):
            world.revert_all()
            aborted_at = (w + 1) * spec.window
            break
    world.sink.seal()
    return world, timeline, breaches, aborted_at


def run_experiment(spec: ExperimentSpec, produced_at=None):
    """Run ``spec`` end to end and return its :class:`ExperimentReport`."""
    topo = spec.check()
    seeds = {"master": spec.seed, "permutation": derive_seed(spec.seed, "permutation")}
    physical = spec.physical
    groups = None if physical else assign_groups(topo.traffic.population, spec.fraction, spec.salt)
    codes = None if groups is None else groups.codes()
    world, timeline, breaches, aborted_at = _run_world(
        spec, topo, spec.faults, codes, spec.guardrails, spec.abort_policy)
    seeds.update(world.seeds)
    sink = world.sink
    abort = None
    if aborted_at is not None:
        abort = {"at": aborted_at, "breach": breaches[0]}

    series = {"global": sink.series(spec.metric, "global")}
    if physical:
        # paired no-fault reference from the same seed stands in for the prior-period trend
        ref_world, _, _, _ = _run_world(
            replace(spec, duration=len(series["global"]) * spec.window), topo, (), None, (), "never")
        reference = ref_world.sink.series(spec.metric, "global")
        series["reference"] = reference
        report = baseline_deviation(series["global"], BaselineModel(reference, spec.baseline_band))
        skip = set()
        for f in spec.faults:
            for edge in (f.start, f.end):
                for dev in report.windows:
                    if edge / 1000.0 <= dev.start < edge / 1000.0 + spec.transient:
                        skip.add(dev.start)
        judged = [d for d in report.windows if d.start not in skip]
        flagged = tuple(d.start for d in judged if d.flagged)
        ref_mean = float(np.mean([d.reference for d in judged])) if judged else 0.0
        cur_mean = float(np.mean([d.current for d in judged])) if judged else 0.0
        if ref_mean == 0:
            raise IndeterminateControlError("reference run has zero mean steady-state value")
        effect = (cur_mean - ref_mean) / ref_mean
        status = "aborted" if abort else ("refuted" if flagged else "upheld")
        verdict = Verdict(status, effect, None, "baseline", len(judged), ref_mean, cur_mean, flagged, abort)
        sizes = {"global": topo.traffic.population}
    else:
        sizes = groups.sizes()
        for g in ("control", "experiment"):
            series[g] = _per_capita(sink.series(spec.metric, g), sizes[g], spec.metric)
        if abort:
            effect = relative_effect(series["control"], series["experiment"])
            verdict = Verdict("aborted", effect, None, "groups", len(series["control"]),
                              float(series["control"].values().mean()),
                              float(series["experiment"].values().mean()), abort=abort)
        else:
            verdict = evaluate_hypothesis(series["control"], series["experiment"], spec.delta, spec.alpha,
                                          spec.permutations, seeds["permutation"])
    log.info("%s: %s (effect %s, p %s)", spec.name, verdict.status, verdict.effect, verdict.p_value)
    if produced_at is None:
        produced_at = dt.datetime.now(dt.timezone.utc).isoformat(timespec="seconds")
    snapshot = spec.to_dict(inline_topology=True)
    return ExperimentReport(
        spec=snapshot,
        seeds=seeds,
        topology_version=topo.version,
        groups=sizes,
        series=series,
        timeline=timeline,
        breaches=breaches,
        verdict=verdict,
        deaths=[{"time": e.time, "instance": e.payload["instance"]} for e in world.log if e.kind == "instance-death"],
        csv=sink.to_csv_text(),
        produced_at=produced_at,
    )


def _first_divergence(stored: MetricSeries, fresh: MetricSeries):
    for (s1, v1), (s2, v2) in zip(stored.samples, fresh.samples):
        if s1 != s2 or v1 != v2:
            return s1
    longer = max(stored.samples, fresh.samples, key=len)
    shorter = min(len(stored.samples), len(fresh.samples))
    return longer[shorter][0] if len(longer) > shorter else None


def replay(report: ExperimentReport | dict):
    """Re-run a report's snapshot and check the series and verdict match exactly.

    Returns the fresh report; raises :class:`ReplayMismatchError` naming the
    first divergent window otherwise.
    """
    doc = report.to_dict() if isinstance(report, ExperimentReport) else report
    if not isinstance(doc, dict) or not isinstance(doc.get("spec"), dict):
        raise SchemaError("report has no spec snapshot", "spec")
    stored = ExperimentReport.from_dict(doc)
    fresh = run_experiment(ExperimentSpec.from_dict(doc["spec"]), produced_at=stored.produced_at)
    # compare through the JSON encoding so stored and fresh values have the same types
    fresh = ExperimentReport.from_dict(json.loads(fresh.to_json()), csv=fresh.csv)
    for name in sorted(set(stored.series) | set(fresh.series)):
        if name not in stored.series or name not in fresh.series:
            raise ReplayMismatchError(f"series {name!r} missing on one side")
        where = _first_divergence(stored.series[name], fresh.series[name])
        if where is not None:
            raise ReplayMismatchError(f"series {name!r} diverges at window {where}s", window=where)
    if stored.verdict != fresh.verdict:
        raise ReplayMismatchError("verdict differs")
    if stored.breaches != fresh.breaches or stored.timeline != fresh.timeline:
        raise ReplayMismatchError("guardrail record differs")
    if stored.deaths != fresh.deaths:
        raise ReplayMismatchError("instance deaths differ")
    return fresh
