import datetime as dt
import json

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from zoneinfo import ZoneInfo

from chaoslab.errors import ChaoslabError, SchemaError
from chaoslab.scheduler import (
    Cadence,
    History,
    RunRecord,
    Schedule,
    Scheduler,
    execute_due,
    load_schedules,
    mark_stale,
    next_due,
)

UTC = dt.timezone.utc
SATURDAY_NOON = dt.datetime(2026, 10, 17, 12, 0, tzinfo=UTC)


def schedule(name, spec, **cadence):
    return Schedule(name, spec, Cadence(**cadence))


def test_saturday_noon_waits_for_monday_nine():
    c = Cadence("business-hours", period=3600)
    assert c.next_fire(SATURDAY_NOON) == dt.datetime(2026, 10, 19, 9, 0, tzinfo=UTC)


def test_business_hours_grid_inside_a_day():
    c = Cadence("business-hours", period=3600, zone="America/Los_Angeles")
    monday = dt.datetime(2026, 10, 19, tzinfo=ZoneInfo("America/Los_Angeles"))
    fires = list(c.fires(monday, monday + dt.timedelta(days=1)))
    assert [f.astimezone(ZoneInfo("America/Los_Angeles")).hour for f in fires] == list(range(9, 17))
    after_close = dt.datetime(2026, 10, 19, 16, 30, tzinfo=ZoneInfo("America/Los_Angeles"))
    assert c.next_fire(after_close).astimezone(ZoneInfo("America/Los_Angeles")) == dt.datetime(
        2026, 10, 20, 9, 0, tzinfo=ZoneInfo("America/Los_Angeles"))


def test_fire_exactly_at_now_counts():
    c = Cadence("interval", period=60)
    t = dt.datetime(2026, 1, 1, 0, 5, tzinfo=UTC)
    assert c.next_fire(t) == t
    assert c.next_fire(t + dt.timedelta(seconds=1)) == t + dt.timedelta(seconds=60)


def test_monthly_fires_twelve_times_a_year():
    c = Cadence("monthly", day=1, at="00:00")
    fires = list(c.fires(dt.datetime(2026, 1, 1, tzinfo=UTC), dt.datetime(2027, 1, 1, tzinfo=UTC)))
    assert len(fires) == 12
    assert [f.month for f in fires] == list(range(1, 13))


def test_monthly_respects_the_zone_across_dst():
    c = Cadence("monthly", day=15, at="10:00", zone="Europe/Dublin")
    fires = list(c.fires(dt.datetime(2026, 1, 1, tzinfo=UTC), dt.datetime(2027, 1, 1, tzinfo=UTC)))
    assert {f.astimezone(ZoneInfo("Europe/Dublin")).hour for f in fires} == {10}
    assert {f.hour for f in fires} == {9, 10}


@settings(max_examples=300, deadline=None)
@given(st.datetimes(min_value=dt.datetime(2000, 1, 1), max_value=dt.datetime(2100, 1, 1)),
       st.sampled_from(["UTC", "America/New_York", "Asia/Tokyo", "Australia/Sydney"]),
       st.sampled_from([600, 1800, 3600, 5400]))
def test_business_hours_property(now, zone, period):
    c = Cadence("business-hours", period=period, zone=zone)
    now = now.replace(tzinfo=UTC)
    fire = c.next_fire(now)
    local = fire.astimezone(ZoneInfo(zone))
    assert fire >= now
    assert local.weekday() < 5
    assert dt.time(9) <= local.time() < dt.time(17)
    assert fire - now <= dt.timedelta(days=4)


@pytest.mark.parametrize(
    "kwargs,path",
    [
        (dict(kind="hourly"), "cadence.kind"),
        (dict(kind="interval", period=0), "cadence.period"),
        (dict(kind="monthly", day=31), "cadence.day"),
        (dict(kind="monthly", zone="Mars/Olympus"), "cadence.zone"),
        (dict(kind="business-hours", open="18:00"), "cadence.open"),
    ],
)
def test_cadence_validation(kwargs, path):
    with pytest.raises(SchemaError) as err:
        Cadence(**kwargs)
    assert err.value.path == path


def test_schedule_documents():
    doc = {"schedules": [
        {"name": "a", "spec": "x", "cadence": {"kind": "interval", "period": 60}},
        {"name": "b", "spec": "y", "cadence": {"kind": "monthly"}, "enabled": False},
    ]}
    loaded = load_schedules(doc)
    assert [s.to_dict() for s in loaded] == [Schedule.from_dict(s.to_dict()).to_dict() for s in loaded]
    assert [s.name for s, _ in next_due(loaded, SATURDAY_NOON)] == ["a"]
    with pytest.raises(SchemaError) as err:
        load_schedules({"schedules": [{"name": "a", "spec": "x", "cadence": {"kind": "weekly"}}]})
    assert err.value.path == "schedules[0].cadence.kind"


# ---------------------------------------------------------------------------
# history


def record(version, name="s"):
    return RunRecord(name, "spec", version, "upheld", None, "2026-01-01T00:00:00+00:00")


def test_history_is_hash_chained_and_persistent(tmp_path):
    path = tmp_path / "h.jsonl"
    h = History(path)
    first = h.append(record(1))
    second = h.append(record(1))
    assert second.prev == first.hash and first.prev == ""
    reloaded = History(path)
    assert [r.hash for r in reloaded.records] == [first.hash, second.hash]
    assert len(path.read_text().splitlines()) == 2


def test_tampering_breaks_the_chain(tmp_path):
    path = tmp_path / "h.jsonl"
    h = History(path)
    h.append(record(1))
    h.append(record(1))
    lines = path.read_text().splitlines()
    doc = json.loads(lines[0])
    doc["verdict"] = "refuted"
    path.write_text(json.dumps(doc) + "\n" + lines[1] + "\n")
    with pytest.raises(ChaoslabError):
        History(path)


def test_mark_stale_rules():
    history = [record(1), record(2), record(3)]
    assert [r.stale for r in mark_stale(history, 3)] == [True, True, False]
    assert [r.stale for r in mark_stale(history, 1)] == [False, False, False]
    once = mark_stale(history, 2)
    assert [r.stale for r in mark_stale(once, 1)] == [True, False, False]
    with pytest.raises(ValueError):
        mark_stale(history, 0)


def test_version_bump_makes_older_runs_stale(tmp_path):
    h = History(tmp_path / "h.jsonl")
    h.append(record(1))
    assert [r.stale for r in h.view()] == [False]
    h.bump_version(2, SATURDAY_NOON)
    assert [r.stale for r in History(tmp_path / "h.jsonl").view()] == [True]
    assert len(h.runs) == 1


# ---------------------------------------------------------------------------
# execution


class FakeReport:
    def __init__(self, status):
        self.topology_version = 1
        self.verdict = type("V", (), {"status": status})()


def test_invalid_first_spec_does_not_block_the_second():
    scheds = [schedule("a", "does-not-exist", kind="interval", period=60),
              schedule("b", "three-region-monkey", kind="interval", period=60)]
    history = History()
    now = dt.datetime(2026, 10, 16, 12, 0, 30, tzinfo=UTC)
    records = execute_due(scheds, now, executor=lambda spec: FakeReport("upheld"), history=history,
                          since=now - dt.timedelta(seconds=60))
    assert [(r.schedule, r.verdict) for r in records] == [("a", "error"), ("b", "upheld")]
    assert "FileNotFoundError" in records[0].error
    assert len(history.records) == 2


def test_nothing_due_leaves_history_alone():
    scheds = [schedule("a", "three-region-monkey", kind="monthly", day=1)]
    history = History()
    assert execute_due(scheds, dt.datetime(2026, 10, 16, 12, tzinfo=UTC), history=history) == []
    assert history.records == []


def test_each_fire_runs_once():
    scheds = [schedule("a", "three-region-monkey", kind="interval", period=60)]
    history = History()
    run = lambda spec: FakeReport("upheld")  # noqa: E731
    t = dt.datetime(2026, 10, 16, 12, 1, tzinfo=UTC)
    assert len(execute_due(scheds, t, run, history)) == 1
    assert execute_due(scheds, t + dt.timedelta(seconds=30), run, history) == []
    assert len(execute_due(scheds, t + dt.timedelta(seconds=60), run, history)) == 1


def test_executor_errors_are_recorded():
    def boom(spec):
        raise RuntimeError("simulator fell over")

    scheds = [schedule("a", "three-region-monkey", kind="interval", period=60)]
    t = dt.datetime(2026, 10, 16, 12, 1, tzinfo=UTC)
    (rec,) = execute_due(scheds, t, boom, History())
    assert rec.verdict == "error" and "simulator fell over" in rec.error


def test_due_monkey_schedule_runs_the_real_experiment(tmp_path):
    scheds = [schedule("monkey", "three-region-monkey", kind="business-hours", period=3600)]
    history = History(tmp_path / "history.jsonl")
    monday_ten = dt.datetime(2026, 10, 19, 10, 0, tzinfo=UTC)
    (rec,) = execute_due(scheds, monday_ten, history=history, out_dir=tmp_path)
    assert rec.verdict == "upheld" and rec.topology_version == 1
    assert rec.report.endswith("three-region-monkey-20261019T100000Z.json")
    assert (tmp_path / "three-region-monkey-20261019T100000Z.csv").exists()


def test_scheduler_loop_uses_its_clock():
    times = iter([dt.datetime(2026, 10, 16, 12, 0, 30, tzinfo=UTC), dt.datetime(2026, 10, 16, 12, 1, 5, tzinfo=UTC)])
    scheds = [schedule("a", "three-region-monkey", kind="interval", period=60)]
    history = History()
    loop = Scheduler(scheds, history, executor=lambda spec: FakeReport("refuted"), clock=lambda: next(times))

    def stop(_):
        raise KeyboardInterrupt

    # the loop starts at 12:00:30 and first checks at 12:01:05, so the 12:01 fire runs once
    with pytest.raises(KeyboardInterrupt):
        loop.run_forever(1, sleep=stop)
    assert [r.timestamp for r in history.records] == ["2026-10-16T12:01:00+00:00"]
    loop.clock = lambda: dt.datetime(2026, 10, 16, 12, 1, 50, tzinfo=UTC)
    assert loop.tick() == []
