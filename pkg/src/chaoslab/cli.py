"""Command line entry point: validate, run, schedule, replay and report.

Standard output only ever carries machine-readable output (JSON, or CSV with
``--format csv``); tables and diagnostics go to standard error.

Exit codes: 0 upheld / ok, 1 refuted, 2 aborted on a guardrail, 3 invalid
configuration, 4 internal error or replay mismatch.
"""

from __future__ import annotations

import argparse
import datetime as dt
import functools
import json
import logging
import os
import sys
from pathlib import Path

from chaoslab import __version__
from chaoslab.errors import ConfigError, ReplayMismatchError, SchemaError

log = logging.getLogger("chaoslab")

EXIT_OK = 0
EXIT_REFUTED = 1
EXIT_ABORTED = 2
EXIT_CONFIG = 3
EXIT_INTERNAL = 4

VERDICT_CODES = {"upheld": EXIT_OK, "refuted": EXIT_REFUTED, "aborted": EXIT_ABORTED}


def _out_dir(out):
    return Path(out or os.environ.get("CHAOSLAB_OUT") or "chaoslab-out")


def _emit(obj):
    sys.stdout.write(json.dumps(obj, sort_keys=True) + "\n")


def _read_json(path):
    try:
        return json.loads(Path(path).read_text())
    except FileNotFoundError:
        raise SchemaError(f"no such file {path}") from None
    except json.JSONDecodeError as exc:
        raise SchemaError(f"{path} does not parse: {exc}") from None


def _summary(report, paths=None):
    v = report.verdict
    out = {
        "name": report.spec["name"],
        "status": v.status,
        "mode": v.mode,
        "effect": v.effect,
        "p_value": v.p_value,
        "windows": v.windows,
        "breaches": report.breaches,
        "seed": report.seeds["master"],
        "topology_version": report.topology_version,
    }
    if paths:
        out["report"], out["csv"] = (str(p) for p in paths)
    return out


def _table(report):
    v = report.verdict
    fmt = lambda x: "-" if x is None else f"{x:.6g}"  # noqa: E731
    rows = [
        ("experiment", report.spec["name"]),
        ("verdict", v.status),
        ("mode", v.mode),
        ("effect", fmt(v.effect)),
        ("p-value", fmt(v.p_value)),
        ("windows", str(v.windows)),
        ("mean control", fmt(v.mean_control)),
        ("mean experiment", fmt(v.mean_experiment)),
    ]
    if v.mode == "baseline":
        rows.append(("flagged windows", str(len(v.flagged))))
    for b in report.breaches:
        rows.append(("breach", f"{b['service'] or 'global'}.{b['metric']} from {b['first_window']:g}s = {b['value']:.4g}"))
    if v.abort:
        rows.append(("aborted at", f"{v.abort['at']:g}s"))
    width = max(len(k) for k, _ in rows)
    return "\n".join(f"{k.ljust(width)}  {val}" for k, val in rows)


def _kind_of(doc):
    if isinstance(doc, dict) and "schedules" in doc:
        return "schedule"
    if isinstance(doc, dict) and "services" in doc:
        return "topology"
    return "experiment"


# ---------------------------------------------------------------------------
# verbs


def _guarded(fn):
    """Turn exceptions into exit codes so every verb returns a code."""

    @functools.wraps(fn)
    def wrapper(*args, **kwargs):
        try:
            return fn(*args, **kwargs)
        except ConfigError as exc:
            print(f"config error: {exc}", file=sys.stderr)
            _emit({"error": "config", "path": exc.path, "message": str(exc)})
            return EXIT_CONFIG
        except BrokenPipeError:
            raise  # reader went away; main() exits quietly
        except Exception as exc:  # anything else is an internal error, still with a code
            log.exception("%s failed", fn.__name__)
            _emit({"error": "internal", "message": f"{type(exc).__name__}: {exc}"})
            return EXIT_INTERNAL

    return wrapper


@_guarded
def cmd_validate(paths):
    from chaoslab.experiment import ExperimentSpec
    from chaoslab.scheduler import _resolve_spec, load_schedules
    from chaoslab.sim.topology import load_topology

    results = []
    for path in paths:
        doc = _read_json(path)
        kind = _kind_of(doc)
        if kind == "topology":
            load_topology(doc)
        elif kind == "schedule":
            for s in load_schedules(doc):
                _resolve_spec(s.spec, Path(path).parent)
        else:
            ExperimentSpec.from_dict(doc, base_dir=Path(path).parent).check()
        print(f"{path}: ok ({kind})", file=sys.stderr)
        results.append({"path": str(path), "kind": kind, "ok": True})
    _emit({"valid": results})
    return EXIT_OK


def _load_spec_arg(ref):
    from chaoslab.experiment import fixture_spec, load_spec

    if Path(ref).exists():
        return load_spec(ref)
    try:
        spec = fixture_spec(ref)
    except FileNotFoundError:
        raise SchemaError(f"no experiment file or fixture named {ref!r}") from None
    spec.check()
    return spec


@_guarded
def cmd_run(spec_ref, out=None, fmt="json", **overrides):
    """Run one experiment; ``overrides`` are seed, duration, alpha, delta and fraction."""
    from chaoslab.experiment import run_experiment

    spec = _load_spec_arg(spec_ref).with_overrides(**overrides)
    spec.check()
    report = run_experiment(spec)
    paths = report.write(_out_dir(out))
    print(_table(report), file=sys.stderr)
    if fmt == "csv":
        sys.stdout.write(report.csv)
    else:
        _emit(_summary(report, paths))
    return VERDICT_CODES[report.verdict.status]


@_guarded
def cmd_replay(report_path):
    from chaoslab.experiment import replay

    doc = _read_json(report_path)
    if not isinstance(doc, dict) or not isinstance(doc.get("spec"), dict):
        raise SchemaError("report has no spec snapshot", "spec")
    try:
        fresh = replay(doc)
        csv_path = Path(report_path).with_suffix(".csv")
        if csv_path.exists() and csv_path.read_text() != fresh.csv:
            raise ReplayMismatchError("CSV export differs")
    except ReplayMismatchError as exc:
        print(f"replay mismatch: {exc}", file=sys.stderr)
        _emit({"match": False, "reason": str(exc), "window": exc.window})
        return EXIT_INTERNAL
    print(f"replay of {doc['spec'].get('name')} matches", file=sys.stderr)
    _emit({"match": True, "status": fresh.verdict.status})
    return EXIT_OK


@_guarded
def cmd_report(report_path, fmt="json"):
    from chaoslab.experiment import ExperimentReport

    doc = _read_json(report_path)
    try:
        report = ExperimentReport.from_dict(doc)
    except (KeyError, TypeError) as exc:
        raise SchemaError(f"not a report document: missing {exc}") from None
    print(_table(report), file=sys.stderr)
    if fmt == "csv":
        csv_path = Path(report_path).with_suffix(".csv")
        sys.stdout.write(csv_path.read_text() if csv_path.exists() else "")
    else:
        _emit(_summary(report))
    return VERDICT_CODES[report.verdict.status]


@_guarded
def cmd_schedule(schedule_path, out=None, once=False, now=None, poll=30.0):
    from chaoslab.scheduler import UTC, History, Scheduler, execute_due, load_schedules, next_due

    doc = _read_json(schedule_path)
    schedules = load_schedules(doc)
    out = _out_dir(out)
    history = History(out / "history.jsonl")
    base = Path(schedule_path).parent
    if once:
        now = dt.datetime.fromisoformat(now) if now else dt.datetime.now(UTC)
        # a schedule with no history counts as due if it fired within the last poll interval
        since = now - dt.timedelta(seconds=poll)
        records = execute_due(schedules, now, history=history, out_dir=out, base_dir=base, since=since)
        for r in records:
            print(f"{r.schedule}: {r.verdict} ({r.timestamp})", file=sys.stderr)
        upcoming = [{"schedule": s.name, "next": t.isoformat()} for s, t in next_due(schedules, now)]
        _emit({"executed": [r.body() | {"hash": r.hash} for r in records], "next": upcoming})
        return EXIT_OK
    print(f"scheduler running with {len(schedules)} schedules; Ctrl-C stops it", file=sys.stderr)
    try:
        Scheduler(schedules, history, out_dir=out, base_dir=base).run_forever(poll)
    except KeyboardInterrupt:
        print("scheduler stopped", file=sys.stderr)
    return EXIT_OK


# ---------------------------------------------------------------------------


def build_parser():
    parser = argparse.ArgumentParser(prog="chaoslab", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=__version__)
    parser.add_argument("-v", "--verbose", action="count", default=0, help="more logging on stderr")
    sub = parser.add_subparsers(dest="verb", required=True)

    p = sub.add_parser("validate", help="check topology, experiment or schedule documents")
    p.add_argument("paths", nargs="+")
    p.set_defaults(func=lambda a: cmd_validate(a.paths))

    p = sub.add_parser("run", help="run one experiment and write its report")
    p.add_argument("spec", help="experiment document path or shipped fixture name")
    p.add_argument("--seed", type=int)
    p.add_argument("--duration", type=float, help="simulated seconds")
    p.add_argument("--alpha", type=float)
    p.add_argument("--delta", type=float)
    p.add_argument("--fraction", type=float, help="experiment group fraction")
    p.add_argument("--out", help="output directory (default: $CHAOSLAB_OUT or ./chaoslab-out)")
    p.add_argument("--format", choices=("json", "csv"), default="json")
    p.set_defaults(func=lambda a: cmd_run(a.spec, a.out, a.format, seed=a.seed, duration=a.duration,
                                          alpha=a.alpha, delta=a.delta, fraction=a.fraction))

    p = sub.add_parser("schedule", help="run the scheduler in the foreground")
    p.add_argument("schedules")
    p.add_argument("--out")
    p.add_argument("--once", action="store_true", help="execute what fired within the last poll interval and exit")
    p.add_argument("--now", help="ISO timestamp to use as the current time with --once")
    p.add_argument("--poll", type=float, default=30.0, help="seconds between checks")
    p.set_defaults(func=lambda a: cmd_schedule(a.schedules, a.out, a.once, a.now, a.poll))

    p = sub.add_parser("replay", help="re-run a report's snapshot and compare")
    p.add_argument("report")
    p.set_defaults(func=lambda a: cmd_replay(a.report))

    p = sub.add_parser("report", help="summarize a stored report")
    p.add_argument("report")
    p.add_argument("--format", choices=("json", "csv"), default="json")
    p.set_defaults(func=lambda a: cmd_report(a.report, a.format))
    return parser


def main(argv=None):
    args = build_parser().parse_args(argv)
    level = logging.WARNING - 10 * min(args.verbose, 2)
    logging.basicConfig(level=level, stream=sys.stderr, format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except BrokenPipeError:
        # stdout closed early (e.g. piped into head); silence the flush at exit
        os.dup2(os.open(os.devnull, os.O_WRONLY), sys.stdout.fileno())
        return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
