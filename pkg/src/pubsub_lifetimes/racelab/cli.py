"""``racelab`` command line."""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

from ..errors import BoundExceeded, MalformedTrace
from .explore import DEFAULT_MAX_DEPTH, DEFAULT_MAX_STATES, explore, replay, violations_at
from .model import Arch
from .scenarios import BUILTIN, SCENARIO_SCHEMA, TRACE_SCHEMA, load_scenario, scenario_from_dict


def _run(args) -> int:
    scenario = load_scenario(args.scenario)
    try:
        result = explore(scenario, args.arch, args.max_depth, args.max_states)
    except BoundExceeded as exc:
        print(f"racelab: {exc}", file=sys.stderr)
        return 2
    print(
        f"{result.architecture.value} {scenario.name}: {result.states_visited} states, "
        f"{len(result.violations)} violations"
    )
    for v in result.violations:
        steps = " ".join(f"{s.actor}:{s.step}" for s in v.trace)
        print(f"  {v.kind.value} msgs={list(v.messages)} [{len(v.trace)}] {steps}")
    if args.out:
        Path(args.out).write_text(json.dumps(result.as_dict(), indent=2) + "\n")
    return 0


def _replay(args) -> int:
    doc = json.loads(Path(args.replay).read_text())
    try:
        scenario = scenario_from_dict(doc["scenario"])
        arch = Arch(doc["architecture"])
        violations = doc["violations"]
    except (KeyError, ValueError) as exc:
        print(f"racelab: not a racelab output file: {exc}", file=sys.stderr)
        return 2
    bad = 0
    for i, v in enumerate(violations):
        try:
            state = replay(scenario, arch, v["trace"])
        except MalformedTrace as exc:
            print(f"  #{i}: malformed trace: {exc}")
            bad += 1
            continue
        kinds = {k.value for k, _ in violations_at(state)}
        ok = v["kind"] in kinds
        bad += not ok
        print(f"  #{i}: {v['kind']} {'reproduced' if ok else 'NOT reproduced'}")
    return 1 if bad else 0


def main(argv: list[str] | None = None) -> int:
    ap = argparse.ArgumentParser(prog="racelab", description="Explore metadata-operation interleavings.")
    ap.add_argument("--arch", choices=[a.value for a in Arch], default=Arch.OWNER_DRIVEN.value)
    ap.add_argument("--scenario", default="crash_join", help=f"built-in name ({', '.join(BUILTIN)}) or JSON file")
    ap.add_argument("--max-depth", type=int, default=DEFAULT_MAX_DEPTH)
    ap.add_argument("--max-states", type=int, default=DEFAULT_MAX_STATES)
    ap.add_argument("--out", help="write states, violations and traces as JSON")
    ap.add_argument("--replay", metavar="FILE", help="re-run every trace in a previous --out file")
    ap.add_argument("--list", action="store_true", help="list built-in scenarios")
    ap.add_argument("--schema", choices=["scenario", "trace"], help="print a JSON schema")
    args = ap.parse_args(argv)

    if args.schema:
        print(json.dumps(SCENARIO_SCHEMA if args.schema == "scenario" else TRACE_SCHEMA, indent=2))
        return 0
    if args.list:
        for name, sc in BUILTIN.items():
            print(name, json.dumps(sc.as_dict()["scripts"]))
        return 0
    if args.replay:
        return _replay(args)
    try:
        return _run(args)
    except ValueError as exc:
        print(f"racelab: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    raise SystemExit(main())
