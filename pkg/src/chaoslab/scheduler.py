"""Wall-clock cadences for recurring experiments and the run history.

Schedules fire on one of three cadences: every ``period`` during weekday
business hours in a time zone, once a month on a fixed day and time, or on
a plain interval. Each execution appends a hash-chained JSON Lines record;
topology version bumps are appended too, and any run recorded against an
older version is reported stale.
"""

from __future__ import annotations

import datetime as dt
import hashlib
import json
import logging
import math
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from zoneinfo import ZoneInfo, ZoneInfoNotFoundError

from chaoslab.errors import ChaoslabError, SchemaError

log = logging.getLogger(__name__)

CADENCES = ("business-hours", "monthly", "interval")
UTC = dt.timezone.utc
EPOCH = dt.datetime(1970, 1, 1, tzinfo=UTC)


def _aware(t):
    if isinstance(t, str):
        t = dt.datetime.fromisoformat(t)
    return t if t.tzinfo is not None else t.replace(tzinfo=UTC)


def _clock(text, path):
    try:
        hh, mm = (int(x) for x in text.split(":"))
        return dt.time(hh, mm)
    except (ValueError, AttributeError):
        raise SchemaError("expected HH:MM", path) from None


@dataclass(frozen=True)
class Cadence:
    kind: str
    period: float = 3600.0  # seconds; business-hours and interval
    zone: str = "UTC"
    day: int = 1  # monthly
    at: str = "00:00"  # monthly, local time
    open: str = "09:00"  # business hours
    close: str = "17:00"
    anchor: str | None = None  # interval: ISO timestamp the grid is aligned to

    def __post_init__(self):
        if self.kind not in CADENCES:
            raise SchemaError(f"unknown cadence {self.kind!r}", "cadence.kind")
        if not (self.period > 0 and math.isfinite(self.period)):
            raise SchemaError("period must be > 0", "cadence.period")
        if not 1 <= self.day <= 28:
            raise SchemaError("day must lie in 1..28", "cadence.day")
        try:
            ZoneInfo(self.zone)
        except (ZoneInfoNotFoundError, ValueError):
            raise SchemaError(f"unknown time zone {self.zone!r}", "cadence.zone") from None
        for name in ("at", "open", "close"):
            _clock(getattr(self, name), f"cadence.{name}")
        if _clock(self.open, "cadence.open") >= _clock(self.close, "cadence.close"):
            raise SchemaError("business hours must open before they close", "cadence.open")

    @property
    def tz(self):
        return ZoneInfo(self.zone)

    def next_fire(self, now):
        """Earliest fire time at or after ``now`` (aware datetime, UTC)."""
        now = _aware(now).astimezone(UTC)
        if self.kind == "interval":
            anchor = _aware(self.anchor) if self.anchor else EPOCH
            k = math.ceil((now - anchor).total_seconds() / self.period)
            fire = anchor + dt.timedelta(seconds=max(k, 0) * self.period)
            return fire.astimezone(UTC)
        local = now.astimezone(self.tz)
        if self.kind == "monthly":
            at = _clock(self.at, "cadence.at")
            year, month = local.year, local.month
            while True:
                fire = dt.datetime.combine(dt.date(year, month, self.day), at, tzinfo=self.tz).astimezone(UTC)
                if fire >= now:
                    return fire
                year, month = (year + 1, 1) if month == 12 else (year, month + 1)
        opening, closing = _clock(self.open, "cadence.open"), _clock(self.close, "cadence.close")
        day = local.date()
        while True:
            if day.weekday() < 5:
                start = dt.datetime.combine(day, opening, tzinfo=self.tz)
                end = dt.datetime.combine(day, closing, tzinfo=self.tz)
                span = (end - start).total_seconds()
                offset = (now.astimezone(self.tz) - start).total_seconds()
                k = max(0, math.ceil(offset / self.period))
                if k * self.period < span:
                    return (start + dt.timedelta(seconds=k * self.period)).astimezone(UTC)
            day += dt.timedelta(days=1)

    def fires(self, start, end):
        """Every fire time in ``[start, end)``."""
        t, end = _aware(start), _aware(end)
        while True:
            fire = self.next_fire(t)
            if fire >= end:
                return
            yield fire
            t = fire + dt.timedelta(microseconds=1)

    def to_dict(self):
        d = {"kind": self.kind, "zone": self.zone}
        if self.kind == "monthly":
            d.update(day=self.day, at=self.at)
        elif self.kind == "business-hours":
            d.update(period=self.period, open=self.open, close=self.close)
        else:
            d.update(period=self.period, anchor=self.anchor)
        return d

    @classmethod
    def from_dict(cls, d):
        if not isinstance(d, dict) or "kind" not in d:
            raise SchemaError("cadence needs a kind", "cadence.kind")
        unknown = set(d) - {"kind", "period", "zone", "day", "at", "open", "close", "anchor"}
        if unknown:
            raise SchemaError("unknown field", f"cadence.{sorted(unknown)[0]}")
        return cls(**d)


@dataclass(frozen=True)
class Schedule:
    name: str
    spec: str  # fixture experiment name or path to an experiment document
    cadence: Cadence
    enabled: bool = True

    def to_dict(self):
        return {"name": self.name, "spec": self.spec, "cadence": self.cadence.to_dict(), "enabled": self.enabled}

    @classmethod
    def from_dict(cls, d, path="schedule"):
        if not isinstance(d, dict):
            raise SchemaError("expected object", path)
        for key in ("name", "spec", "cadence"):
            if key not in d:
                raise SchemaError("missing required field", f"{path}.{key}")
        try:
            cadence = Cadence.from_dict(d["cadence"])
        except SchemaError as exc:
            raise SchemaError(str(exc).split(": ", 1)[-1], f"{path}.{exc.path}") from None
        return cls(str(d["name"]), str(d["spec"]), cadence, bool(d.get("enabled", True)))


def load_schedules(doc):
    """Schedules from a parsed document ``{"schedules": [...]}``."""
    if not isinstance(doc, dict) or not isinstance(doc.get("schedules"), list):
        raise SchemaError("expected a 'schedules' list", "schedules")
    out = [Schedule.from_dict(s, f"schedules[{i}]") for i, s in enumerate(doc["schedules"])]
    names = [s.name for s in out]
    if len(set(names)) != len(names):
        raise SchemaError("schedule names must be unique", "schedules")
    return out


def next_due(schedules, now):
    """``(schedule, next fire time)`` for every enabled schedule, soonest first."""
    due = [(s, s.cadence.next_fire(now)) for s in schedules if s.enabled]
    return sorted(due, key=lambda pair: (pair[1], pair[0].name))


# ---------------------------------------------------------------------------
# history


@dataclass(frozen=True)
class RunRecord:
    schedule: str
    spec: str
    topology_version: int
    verdict: str  # upheld | refuted | aborted | error
    report: str | None
    timestamp: str  # fire time, ISO 8601 UTC
    error: str | None = None
    stale: bool = False
    kind: str = "run"
    prev: str = ""
    hash: str = ""

    def body(self):
        d = asdict(self)
        d.pop("hash")
        d.pop("stale")  # derived from later version bumps, never written
        return d


def _digest(body):
    return hashlib.sha256(json.dumps(body, sort_keys=True).encode()).hexdigest()


class History:
    """Append-only run log, one hash-chained JSON record per line."""

    def __init__(self, path=None):
        self.path = Path(path) if path else None
        self.records: list[RunRecord] = []
        if self.path and self.path.exists():
            for line in self.path.read_text().splitlines():
                if line.strip():
                    self.records.append(RunRecord(**json.loads(line)))
            self.verify()

    @property
    def head(self):
        return self.records[-1].hash if self.records else ""

    @property
    def runs(self):
        return [r for r in self.records if r.kind == "run"]

    @property
    def version(self):
        """Highest topology version seen, from runs and version bumps."""
        return max((r.topology_version for r in self.records), default=0)

    def append(self, record: RunRecord):
        record = replace(record, stale=False, prev=self.head, hash="")
        record = replace(record, hash=_digest(record.body()))
        self.records.append(record)
        if self.path:
            self.path.parent.mkdir(parents=True, exist_ok=True)
            with self.path.open("a") as fh:
                fh.write(json.dumps(asdict(record) | {"stale": False}, sort_keys=True) + "\n")
        return record

    def verify(self):
        prev = ""
        for i, r in enumerate(self.records):
            if r.prev != prev or r.hash != _digest(r.body()):
                raise ChaoslabError(f"run history is corrupt at record {i}")
            prev = r.hash
        return True

    def bump_version(self, version, timestamp):
        """Record that the topology moved to ``version``; older runs become stale."""
        return self.append(RunRecord("", "", int(version), "", None, _aware(timestamp).isoformat(), kind="version-bump"))

    def last_fire(self, schedule_name):
        for r in reversed(self.records):
            if r.kind == "run" and r.schedule == schedule_name:
                return _aware(r.timestamp)
        return None

    def view(self):
        """Run records with the stale flag applied."""
        return mark_stale(self.runs, self.version)


def mark_stale(history, new_version):
    """Copy of ``history`` with every record older than ``new_version`` flagged stale."""
    if new_version <= 0:
        raise ValueError("topology versions start at 1")
    return [replace(r, stale=r.stale or r.topology_version < new_version) for r in history]


# ---------------------------------------------------------------------------
# execution


def _previous_fire(cadence, since, now):
    """Latest fire time in ``(since, now]`` or None."""
    last = None
    for fire in cadence.fires(since, now + dt.timedelta(microseconds=1)):
        last = fire
    return last


def _resolve_spec(ref, base_dir):
    from chaoslab.experiment import fixture_spec, load_spec

    path = Path(ref)
    if not path.is_absolute() and base_dir:
        path = Path(base_dir) / path
    if path.suffix == ".json" or path.exists():
        return load_spec(path)
    spec = fixture_spec(ref)
    spec.check()
    return spec


def execute_due(schedules, now, executor=None, history=None, out_dir=None, since=None, base_dir=None):
    """Run every schedule with a fire time that passed since its last run.

    A schedule with no recorded run is due when it fired in ``[since, now]``
    (``since`` defaults to ``now``). Each due schedule runs once per call,
    in name order. An error in one run is recorded and never stops the rest.
    Returns the new records.
    """
    from chaoslab.experiment import run_experiment

    executor = executor or run_experiment
    history = history if history is not None else History()
    now = _aware(now).astimezone(UTC)
    since = _aware(since).astimezone(UTC) if since else now
    new = []
    for schedule in sorted((s for s in schedules if s.enabled), key=lambda s: s.name):
        last = history.last_fire(schedule.name)
        window_start = last + dt.timedelta(microseconds=1) if last else since
        fire = _previous_fire(schedule.cadence, window_start, now)
        if fire is None:
            continue
        stamp = fire.strftime("%Y%m%dT%H%M%SZ")
        try:
            spec = _resolve_spec(schedule.spec, base_dir)
            report = executor(spec)
            path = None
            if out_dir is not None:
                path, _ = report.write(out_dir, f"{spec.name}-{stamp}")
                path = str(path)
            record = RunRecord(schedule.name, spec.name, report.topology_version, report.verdict.status,
                               path, fire.isoformat())
        except Exception as exc:  # isolation: one failing run never blocks the others
            log.error("schedule %s failed: %s", schedule.name, exc)
            record = RunRecord(schedule.name, schedule.spec, history.version or 1, "error", None,
                               fire.isoformat(), error=f"{type(exc).__name__}: {exc}")
        new.append(history.append(record))
    return new


@dataclass
class Scheduler:
    """Foreground loop driving :func:`execute_due` on a wall clock."""

    schedules: list
    history: History
    out_dir: str | None = None
    executor: object = None
    base_dir: str | None = None
    clock: object = field(default=lambda: dt.datetime.now(UTC))

    def tick(self, since=None):
        return execute_due(self.schedules, self.clock(), self.executor, self.history, self.out_dir,
                           since=since, base_dir=self.base_dir)

    def run_forever(self, poll_seconds=30.0, sleep=None):
        import time

        sleep = sleep or time.sleep
        since = self.clock()
        while True:
            now = self.clock()
            execute_due(self.schedules, now, self.executor, self.history, self.out_dir,
                        since=since, base_dir=self.base_dir)
            since = now
            sleep(poll_seconds)
