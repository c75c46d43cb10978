"""Command-line entry point: ``dcmd run|query|validate|replay|export``.

Exit codes: 0 success, 1 mission failure or query error, 2 invalid input or
I/O error.
"""

from __future__ import annotations

import argparse
import json
import sys
from datetime import datetime
from pathlib import Path
from typing import Sequence

import yaml

from .agents import DeadlockError, MissionLog, run_mission
from .bayes import BayesError, load_networks
from .graphstore import CorruptSnapshotError, SchemaMismatchError, restore
from .ontology import SchemaError, load_mission_schema, parse_schema, validate_schema
from .query import QueryError, QuerySyntaxError, execute, parse_query
from .scenario import ScenarioError, load_scenario

EXIT_OK = 0
EXIT_FAILURE = 1
EXIT_INPUT = 2

REQUIRED_NETWORKS = ("identity", "hazard")


def _err(msg: str) -> None:
    print(f"dcmd: {msg}", file=sys.stderr)


def _schema(path: str | None):
    if path is None:
        return load_mission_schema()
    return parse_schema(Path(path).read_text(encoding="utf-8"))


def _networks(path: str | None):
    nets, digest = load_networks(path)
    missing = [n for n in REQUIRED_NETWORKS if n not in nets]
    if missing:
        raise BayesError(f"network file lacks: {', '.join(missing)}")
    return nets, digest


def _fmt(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, datetime):
        return value.isoformat(timespec="milliseconds")
    if isinstance(value, float):
        return repr(value)
    return str(value)


# -- subcommands ----------------------------------------------------------------------------


def cmd_run(args) -> int:
    try:
        schema = _schema(args.schema)
        scenario = load_scenario(args.scenario)
        nets, digest = _networks(args.cpt)
    except (OSError, ScenarioError, SchemaError, BayesError) as exc:
        _err(f"invalid input: {exc}")
        return EXIT_INPUT
    try:
        result = run_mission(scenario, args.seed, nets, digest, schema=schema)
    except DeadlockError as exc:
        _err(f"mission aborted: {exc}")
        return EXIT_FAILURE
    out = Path(args.out_dir)
    try:
        out.mkdir(parents=True, exist_ok=True)
        (out / "mission_log.jsonl").write_text(result.log.to_jsonl(), encoding="utf-8")
        for agent, store in sorted(result.stores.items()):
            (out / f"{agent}.dkb").write_bytes(store.snapshot())
        (out / "summary.json").write_text(json.dumps(result.summary, indent=2, sort_keys=True) + "\n",
                                          encoding="utf-8")
    except OSError as exc:
        _err(f"cannot write outputs: {exc}")
        return EXIT_INPUT
    s = result.summary
    print(f"mission {s['scenario']} seed {s['seed']}: {'SUCCESS' if result.success else 'FAILURE'}")
    print(f"known objects confirmed: {s['known_confirmed']}/{len(s['known_objects'])}")
    print(f"hazards verified: {s['hazards_verified']}/{len(s['hazards'])}")
    for h in s["hazards"]:
        print(f"  {h['identity']} in {h['area']}: detected by {h['detected_by']} at {h['detected_at']}, "
              f"{h['status']}" + (f" at {h['verified_at']}" if "verified_at" in h else ""))
    print(f"mission end: {s['end_time']}; outputs in {out}")
    return EXIT_OK if result.success else EXIT_FAILURE


def cmd_query(args) -> int:
    try:
        schema = _schema(args.schema)
        store = restore(Path(args.snapshot).read_bytes(), schema)
    except (OSError, SchemaError, CorruptSnapshotError, SchemaMismatchError) as exc:
        _err(f"cannot load snapshot: {exc}")
        return EXIT_INPUT
    text = args.query
    if text is None:
        try:
            text = Path(args.query_file).read_text(encoding="utf-8")
        except OSError as exc:
            _err(str(exc))
            return EXIT_INPUT
    try:
        result = execute(store, parse_query(text))
    except QuerySyntaxError as exc:
        _err(f"syntax error: {exc}")
        lines = text.splitlines() or [""]
        if 1 <= exc.line <= len(lines):
            print(lines[exc.line - 1], file=sys.stderr)
            print(" " * (exc.column - 1) + "^", file=sys.stderr)
        return EXIT_FAILURE
    except QueryError as exc:
        _err(f"query failed: {exc}")
        return EXIT_FAILURE
    print("\t".join(result.columns))
    for row in result.rows:
        print("\t".join(_fmt(v) for v in row))
    print(f"({len(result.rows)} rows)", file=sys.stderr)
    return EXIT_OK


def cmd_validate(args) -> int:
    checks = []
    if not (args.schema or args.scenario or args.cpt):
        checks = [("schema", None), ("scenario", "mission_fig6"), ("cpt", None)]
    else:
        checks = [(k, getattr(args, k)) for k in ("schema", "scenario", "cpt") if getattr(args, k)]
    problems = 0
    for kind, path in checks:
        label = path or "bundled"
        found = 0
        try:
            if kind == "schema":
                text = Path(path).read_text(encoding="utf-8") if path else None
                schema = parse_schema(text) if text is not None else load_mission_schema()
                for v in validate_schema(schema):
                    print(f"{label}: {v.kind}: {v.type_name}: {v.detail}")
                    found += 1
            elif kind == "scenario":
                load_scenario(path)
            else:
                _networks(path)
        except OSError as exc:
            _err(f"{kind} {label}: {exc}")
            return EXIT_INPUT
        except (ScenarioError, SchemaError, BayesError, yaml.YAMLError) as exc:
            print(f"{label}: {exc}")
            found += 1
        print(f"{kind} {label}: " + ("ok" if not found else f"{found} problem(s)"))
        problems += found
    return EXIT_OK if problems == 0 else EXIT_INPUT


def render_timeline(log: MissionLog) -> str:
    lines = []
    last_tick = None
    for r in log.ordered():
        if r["tick"] != last_tick:
            lines.append(f"[{r['time']}] tick {r['tick']}")
            last_tick = r["tick"]
        detail = {k: v for k, v in r.items() if k not in ("tick", "time", "agent", "seq", "event")}
        body = " ".join(f"{k}={json.dumps(v, separators=(',', ':'))}" for k, v in sorted(detail.items()))
        lines.append(f"    {r['agent']:<10} {r['event']:<16} {body}".rstrip())
    return "\n".join(lines) + "\n"


def cmd_replay(args) -> int:
    try:
        log = MissionLog.from_jsonl(Path(args.log).read_text(encoding="utf-8"))
    except (OSError, ValueError, KeyError) as exc:
        _err(f"cannot read log: {exc}")
        return EXIT_INPUT
    sys.stdout.write(render_timeline(log))
    return EXIT_OK


def export_text(store) -> str:
    out = []
    for thing in sorted(store, key=lambda t: t.id):
        rec = {"id": thing.id, "type": thing.type_name,
               "attributes": {k: _fmt(v) if isinstance(v, datetime) else v
                              for k, v in sorted(thing.attributes.items())}}
        if thing.role_players:
            rec["roles"] = {r: list(ids) for r, ids in sorted(thing.role_players.items())}
        out.append(json.dumps(rec, sort_keys=True, ensure_ascii=False))
    return "\n".join(out) + ("\n" if out else "")


def cmd_export(args) -> int:
    try:
        store = restore(Path(args.snapshot).read_bytes(), _schema(args.schema))
    except (OSError, SchemaError, CorruptSnapshotError, SchemaMismatchError) as exc:
        _err(f"cannot load snapshot: {exc}")
        return EXIT_INPUT
    text = export_text(store)
    if args.output:
        try:
            Path(args.output).write_text(text, encoding="utf-8")
        except OSError as exc:
            _err(str(exc))
            return EXIT_INPUT
    else:
        sys.stdout.write(text)
    return EXIT_OK


# -- parser -------------------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="dcmd", description="Multi-agent DCMD mission simulator.")
    sub = p.add_subparsers(dest="command", required=True)

    run = sub.add_parser("run", help="run a mission and write log, snapshots and summary")
    run.add_argument("--scenario", required=True, help="scenario file or bundled scenario name")
    run.add_argument("--seed", required=True, type=int)
    run.add_argument("--out-dir", default="dcmd-out")
    run.add_argument("--schema", help="schema file (default: bundled mission schema)")
    run.add_argument("--cpt", help="network/CPT file (default: bundled networks)")
    run.set_defaults(func=cmd_run)

    q = sub.add_parser("query", help="run a query against a store snapshot")
    q.add_argument("--snapshot", required=True)
    src = q.add_mutually_exclusive_group(required=True)
    src.add_argument("--query")
    src.add_argument("--query-file")
    q.add_argument("--schema")
    q.set_defaults(func=cmd_query)

    v = sub.add_parser("validate", help="validate schema, scenario and network files")
    v.add_argument("--schema")
    v.add_argument("--scenario")
    v.add_argument("--cpt")
    v.set_defaults(func=cmd_validate)

    r = sub.add_parser("replay", help="render a mission log as a per-tick timeline")
    r.add_argument("--log", required=True)
    r.set_defaults(func=cmd_replay)

    e = sub.add_parser("export", help="dump a store snapshot as JSON lines")
    e.add_argument("--snapshot", required=True)
    e.add_argument("--schema")
    e.add_argument("--output")
    e.set_defaults(func=cmd_export)
    return p


def main(argv: Sequence[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
