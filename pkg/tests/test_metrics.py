import csv
import io
import math

import numpy as np
import pytest

from chaoslab.errors import OpenWindowError, UnknownMetricError
from chaoslab.experiment import fixture_spec, run_experiment
from chaoslab.metrics import (
    BaselineModel,
    Guardrail,
    MetricSeries,
    MetricSink,
    OutcomeEvent,
    baseline_deviation,
    guardrail_check,
    record,
    sps,
)
from chaoslab.sim import build_world, load_fixture
from chaoslab.sim.traffic import expected_arrivals


def closed_sink(events, window_s=10.0, windows=1):
    sink = MetricSink(window_s)
    for e in events:
        record(e, sink)
    for w in range(windows):
        sink.close_window(w, np.zeros((3, 4)))
    return sink


def test_counter_semantics_per_outcome():
    sink = closed_sink([
        OutcomeEvent(1000, 1, "success", 5.0, "control"),
        OutcomeEvent(2000, 2, "fallback-success", 5.0, "control"),
        OutcomeEvent(3000, 3, "failure", 5.0, "control"),
    ])
    assert sink.series("starts", "control").values().tolist() == [2]
    assert sink.series("fallbacks", "control").values().tolist() == [1]
    assert sink.series("failures", "global").values().tolist() == [1]
    assert sink.series("fallback_rate", "control").values()[0] == pytest.approx(1 / 3)
    assert sink.series("error_rate", "control").values()[0] == pytest.approx(1 / 3)


def test_sps_arithmetic():
    events = [OutcomeEvent(t, 0, "success", 1.0) for t in np.linspace(0, 59_999, 600)]
    sink = closed_sink(events, window_s=60.0)
    assert sps(sink.series("starts"), 0.0) == 10.0
    assert sps(sink.series("sps"), 0.0) == 10.0
    assert sps(closed_sink([]).series("starts"), 0.0) == 0


def test_sps_on_open_window_raises():
    sink = closed_sink([], windows=2)
    with pytest.raises(OpenWindowError):
        sps(sink.series("starts"), 20.0)


def test_sps_ignores_event_order():
    events = [OutcomeEvent(t, u, o, 1.0) for t, u, o in
              [(100, 1, "success"), (900, 2, "failure"), (500, 3, "fallback-success"), (300, 4, "success")]]
    a = closed_sink(events).to_csv_text()
    b = closed_sink(list(reversed(events))).to_csv_text()
    assert a == b


def test_recording_into_a_closed_window_is_refused():
    sink = closed_sink([], windows=1)
    with pytest.raises(OpenWindowError):
        record(OutcomeEvent(500, 0, "success", 1.0), sink)


def test_unknown_series():
    with pytest.raises(UnknownMetricError):
        MetricSink().series("nope")


def test_csv_export_layout():
    sink = closed_sink([OutcomeEvent(1000, 1, "success", 1.0, "experiment")], windows=2)
    rows = list(csv.reader(io.StringIO(sink.to_csv_text())))
    assert rows[0] == ["metric", "group", "window_start", "value"]
    keys = [(r[0], r[1]) for r in rows[1:]]
    assert keys == sorted(keys)
    assert ["sps", "experiment", "0.0", "0.1"] in rows


# ---------------------------------------------------------------------------
# baselines


def series(values, window=10.0):
    return MetricSeries("sps", window, "global", [(i * window, v) for i, v in enumerate(values)])


def test_identical_series_have_zero_deviation():
    ref = series([5.0, 6.0, 7.0])
    report = baseline_deviation(ref, BaselineModel(ref))
    assert report.deviations().tolist() == [0, 0, 0] and not report.flagged


def test_halved_series_is_flagged_everywhere():
    report = baseline_deviation(series([2.5, 3.0]), BaselineModel(series([5.0, 6.0]), band=0.1))
    assert report.deviations().tolist() == [-0.5, -0.5]
    assert len(report.flagged) == 2


def test_zero_reference_gives_infinite_deviation():
    report = baseline_deviation(series([1.0, 0.0]), BaselineModel(series([0.0, 0.0])))
    assert math.isinf(report.windows[0].deviation) and report.windows[0].flagged
    assert report.windows[1].deviation == 0 and not report.windows[1].flagged


def test_reference_must_cover_current():
    with pytest.raises(ValueError):
        baseline_deviation(series([1.0, 1.0, 1.0]), BaselineModel(series([1.0])))


# ---------------------------------------------------------------------------
# guardrails


def sink_with(metric, values):
    sink = MetricSink(10.0)
    for w, v in enumerate(values):
        sink.close_window(w, np.zeros((3, 4)), {"svc": {metric: v}})
    return sink


def test_guardrail_needs_consecutive_windows():
    sink = sink_with("latency_p99", [10, 60, 20, 60, 70, 80, 10])
    assert guardrail_check([Guardrail("latency_p99", 50, "svc", windows=3)], sink)[0].first_window == 30.0
    assert guardrail_check([Guardrail("latency_p99", 50, "svc", windows=4)], sink) == []
    first = guardrail_check([Guardrail("latency_p99", 50, "svc")], sink)[0]
    assert (first.first_window, first.value) == (10.0, 60)


def test_guardrail_below_direction():
    sink = sink_with("busy_fraction", [0.5, 0.05, 0.04])
    breach = guardrail_check([Guardrail("busy_fraction", 0.1, "svc", direction="below", windows=2)], sink)
    assert breach[0].first_window == 10.0


def test_loosening_a_threshold_never_adds_breaches():
    sink = sink_with("queue_depth", [3, 8, 12, 7, 15, 2])
    counts = [len(guardrail_check([Guardrail("queue_depth", t, "svc", windows=2)], sink)) for t in range(0, 20)]
    assert counts == sorted(counts, reverse=True)


def test_guardrail_validation():
    with pytest.raises(ValueError):
        Guardrail("latency_p99", float("inf"), "svc")
    with pytest.raises(ValueError):
        Guardrail("latency_p99", 1.0, "svc", windows=0)
    with pytest.raises(UnknownMetricError):
        guardrail_check([Guardrail("cpu", 1.0, "svc")], sink_with("cpu", [1.0]))


def test_no_faults_no_breaches():
    world = build_world(load_fixture("three-region"), seed=1).run_until(300_000)
    rails = [Guardrail(m, t, s) for s in ("api", "playback") for m, t in
             (("error_rate", 0.0), ("busy_fraction", 0.95), ("queue_depth", 50), ("latency_p99", 200))]
    assert guardrail_check(rails, world.sink) == []


def test_bypass_breaches_latency_while_sps_holds():
    report = run_experiment(fixture_spec("cache-bypass"))
    assert report.breaches[0]["metric"] == "latency_p99"
    assert abs(report.verdict.effect) < 0.01


def test_memory_guardrail_breaches_before_the_client_dies():
    report = run_experiment(fixture_spec("unbounded-queue"))
    assert report.breaches[0]["metric"] == "memory_proxy"
    assert report.breaches[0]["detected_at"] * 1000 < report.deaths[0]["time"]


@pytest.mark.slow
def test_day_long_sps_follows_the_arrival_sinusoid():
    topo = load_fixture("three-region")
    world = build_world(topo, seed=3, window_s=600).run_until(86_400_000)
    sps_values = world.sink.series("sps").values()
    edges = np.arange(145) * 600_000
    expected = expected_arrivals(edges[:-1], edges[1:], topo.traffic) / 600
    assert world.sink.series("failures").values().sum() == 0
    # per-window Poisson noise is about 1% of a 600 s window's count at these rates
    assert np.max(np.abs(sps_values - expected) / expected) < 0.03
    assert sps_values.max() / sps_values.min() == pytest.approx(3.0, rel=0.03)
