"""Windowed metric pipeline: boundary counters, SPS, baselines and guardrails."""

from __future__ import annotations

import csv
import io
import math
from collections import defaultdict
from dataclasses import dataclass, field

import numpy as np

from chaoslab.errors import OpenWindowError, UnknownMetricError

GROUPS = ("unassigned", "control", "experiment")
GROUP_CODES = {name: i for i, name in enumerate(GROUPS)}

COUNTERS = ("arrivals", "successes", "fallbacks", "failures")
BOUNDARY_METRICS = COUNTERS + ("starts", "sps", "fallback_rate", "error_rate", "in_flight")
SERVICE_METRICS = ("calls", "latency_p99", "busy_fraction", "queue_depth", "memory_proxy", "fallback_rate", "error_rate")
GUARDRAIL_METRICS = ("latency_p99", "busy_fraction", "queue_depth", "memory_proxy", "fallback_rate", "error_rate")


@dataclass
class MetricSeries:
    metric: str
    window: float  # seconds
    group: str = "global"
    samples: list = field(default_factory=list)  # (window start seconds, value)

    def __len__(self):
        return len(self.samples)

    def starts(self):
        return np.array([s for s, _ in self.samples], dtype=float)

    def values(self):
        return np.array([v for _, v in self.samples], dtype=float)

    @property
    def closed_until(self):
        """Start of the first window not yet closed."""
        return self.samples[-1][0] + self.window if self.samples else 0.0

    def value_at(self, start):
        i = int(round(start / self.window)) - int(round(self.samples[0][0] / self.window)) if self.samples else -1
        if 0 <= i < len(self.samples) and math.isclose(self.samples[i][0], start):
            return self.samples[i][1]
        raise KeyError(start)

    def scaled(self, factor, metric=None):
        return MetricSeries(metric or self.metric, self.window, self.group,
                            [(s, v * factor) for s, v in self.samples])

    def to_dict(self):
        return {"metric": self.metric, "window": self.window, "group": self.group,
                "samples": [[s, v] for s, v in self.samples]}

    @classmethod
    def from_dict(cls, d):
        return cls(d["metric"], d["window"], d["group"], [(s, v) for s, v in d["samples"]])


@dataclass(frozen=True)
class OutcomeEvent:
    time: float  # ms
    user: int
    outcome: str  # success | fallback-success | failure
    latency: float
    group: str | None = None


class MetricSink:
    """Collects one run's metrics; sealed once the run finishes."""

    def __init__(self, window_s=10.0, group_of=None):
        self.window = float(window_s)
        self.group_of = group_of
        self.sealed = False
        self._series: dict[tuple[str, str], MetricSeries] = {}
        self._open = defaultdict(lambda: np.zeros((len(GROUPS), len(COUNTERS)), dtype=np.int64))
        self.closed = 0  # number of closed windows

    def _append(self, metric, group, start, value):
        key = (metric, group)
        if key not in self._series:
            self._series[key] = MetricSeries(metric, self.window, group)
        self._series[key].samples.append((start, value))

    def record(self, event: OutcomeEvent):
        """Count one finished stream-start attempt in its still-open window."""
        if self.sealed:
            raise RuntimeError("sink is sealed")
        w = int(event.time // (self.window * 1000.0))
        if w < self.closed:
            raise OpenWindowError(f"window {w} is already closed")
        group = event.group or (self.group_of(event.user) if self.group_of else "unassigned")
        row = self._open[w][GROUP_CODES[group]]
        if event.outcome == "success":
            row[1] += 1
        elif event.outcome == "fallback-success":
            row[2] += 1
        elif event.outcome == "failure":
            row[3] += 1
        else:
            raise ValueError(f"unknown outcome {event.outcome!r}")

    def close_window(self, w, counts, services=None, in_flight=None):
        """Seal window ``w``; ``counts`` is a (group x counter) array."""
        if self.sealed:
            raise RuntimeError("sink is sealed")
        counts = np.asarray(counts, dtype=np.int64) + self._open.pop(w, 0)
        start = w * self.window
        rows = {g: counts[i] for i, g in enumerate(GROUPS)}
        rows["global"] = counts.sum(axis=0)
        for group, row in rows.items():
            arrivals, succ, fb, fail = (int(x) for x in row)
            done = succ + fb + fail
            self._append("arrivals", group, start, arrivals)
            self._append("successes", group, start, succ)
            self._append("fallbacks", group, start, fb)
            self._append("failures", group, start, fail)
            self._append("starts", group, start, succ + fb)
            self._append("sps", group, start, (succ + fb) / self.window)
            self._append("fallback_rate", group, start, fb / done if done else 0.0)
            self._append("error_rate", group, start, fail / done if done else 0.0)
        if in_flight is not None:
            self._append("in_flight", "global", start, in_flight)
        for service, values in (services or {}).items():
            for metric, value in values.items():
                self._append(f"{service}.{metric}", "global", start, value)
        self.closed = w + 1

    def seal(self):
        self.sealed = True
        return self

    def has(self, metric, group="global"):
        return (metric, group) in self._series

    def series(self, metric, group="global"):
        try:
            return self._series[(metric, group)]
        except KeyError:
            raise UnknownMetricError(f"no series {metric!r} for group {group!r}") from None

    def keys(self):
        return sorted(self._series)

    def rows(self):
        """(metric, group, window start, value) in deterministic order."""
        for metric, group in self.keys():
            for start, value in self._series[(metric, group)].samples:
                yield metric, group, start, value

    def to_csv_text(self):
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(["metric", "group", "window_start", "value"])
        for metric, group, start, value in self.rows():
            writer.writerow([metric, group, repr(float(start)), repr(float(value))])
        return buf.getvalue()


def record(event, sink):
    sink.record(event)


def sps(series: MetricSeries, window_start):
    """Stream starts per second in one closed window of a ``starts`` or ``sps`` series."""
    if window_start >= series.closed_until:
        raise OpenWindowError(f"window starting at {window_start}s is not closed")
    value = series.value_at(window_start)
    return value if series.metric == "sps" else value / series.window


# ---------------------------------------------------------------------------
# baselines


@dataclass
class BaselineModel:
    reference: MetricSeries
    band: float = 0.02


@dataclass(frozen=True)
class WindowDeviation:
    start: float
    current: float
    reference: float
    deviation: float
    flagged: bool


@dataclass
class DeviationReport:
    windows: list

    @property
    def flagged(self):
        return [w for w in self.windows if w.flagged]

    def deviations(self):
        return np.array([w.deviation for w in self.windows])

    def max_abs(self, exclude=()):
        vals = [abs(w.deviation) for w in self.windows if w.start not in exclude]
        return max(vals) if vals else 0.0


def baseline_deviation(current: MetricSeries, model: BaselineModel):
    """Relative deviation of ``current`` from the reference, window by window."""
    ref = {round(s / current.window): v for s, v in model.reference.samples}
    out = []
    for start, value in current.samples:
        key = round(start / current.window)
        if key not in ref:
            raise ValueError(f"reference does not cover window starting at {start}s")
        r = ref[key]
        if r > 0:
            dev = (value - r) / r
        elif value == 0:
            dev = 0.0
        else:
            dev = math.inf
        out.append(WindowDeviation(start, value, r, dev, abs(dev) > model.band))
    return DeviationReport(out)


# ---------------------------------------------------------------------------
# guardrails


@dataclass(frozen=True)
class Guardrail:
    metric: str
    threshold: float
    service: str | None = None
    direction: str = "above"
    windows: int = 1

    def __post_init__(self):
        if not math.isfinite(self.threshold):
            raise ValueError("guardrail threshold must be finite")
        if self.windows < 1:
            raise ValueError("guardrail needs windows >= 1")
        if self.direction not in ("above", "below"):
            raise ValueError(f"direction must be above or below, not {self.direction!r}")

    @property
    def series_id(self):
        return f"{self.service}.{self.metric}" if self.service else self.metric

    def violated(self, value):
        return value > self.threshold if self.direction == "above" else value < self.threshold

    def to_dict(self):
        return {"metric": self.metric, "service": self.service, "threshold": self.threshold,
                "direction": self.direction, "windows": self.windows}

    @classmethod
    def from_dict(cls, d):
        return cls(metric=d["metric"], threshold=float(d["threshold"]), service=d.get("service"),
                   direction=d.get("direction", "above"), windows=int(d.get("windows", 1)))


@dataclass(frozen=True)
class Breach:
    metric: str
    service: str | None
    first_window: float  # start (s) of the first window of the breaching run
    value: float  # value in that window

    def to_dict(self):
        return {"metric": self.metric, "service": self.service,
                "first_window": self.first_window, "value": self.value}


def guardrail_check(guardrails, sink: MetricSink):
    """Breaches of guardrails over every closed window of ``sink``.

    A guardrail breaches once its threshold is violated in ``windows``
    consecutive windows; the report names the first window of that run.
    """
    breaches = []
    for g in guardrails:
        if g.metric not in GUARDRAIL_METRICS:
            raise UnknownMetricError(f"{g.metric!r} is not a guardrail metric")
        series = sink.series(g.series_id)
        run = 0
        for i, (start, value) in enumerate(series.samples):
            run = run + 1 if g.violated(value) else 0
            if run == g.windows:
                first_start, first_value = series.samples[i - g.windows + 1]
                breaches.append(Breach(g.metric, g.service, first_start, first_value))
                break
    return breaches
