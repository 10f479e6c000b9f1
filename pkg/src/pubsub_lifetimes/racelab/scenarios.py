"""Scenario definitions, their JSON schema, and the built-in scenario families."""

from __future__ import annotations

import json
from dataclasses import dataclass, field, replace
from pathlib import Path

import jsonschema

from ..errors import MalformedTrace
from .model import OPERATIONS, PUBLISHER, Durability, ScriptOp

MAX_EXTRA_PROCESSES = 3
MAX_MESSAGES = 3

_ACTOR = {"type": "string", "pattern": "^(P|S[1-9]|M)$"}

SCENARIO_SCHEMA = {
    "$schema": "https://json-schema.org/draft/2020-12/schema",
    "title": "racelab scenario",
    "type": "object",
    "required": ["name", "depth", "scripts"],
    "additionalProperties": False,
    "properties": {
        "name": {"type": "string", "minLength": 1},
        "depth": {"type": "integer", "minimum": 1},
        "durability": {"enum": [d.value for d in Durability]},
        "cache_refresh": {"enum": ["fused", "separate"]},
        "initial": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "members": {"type": "array", "items": _ACTOR, "uniqueItems": True},
                "messages": {"type": "array", "items": {"type": "array", "items": _ACTOR, "uniqueItems": True}},
            },
        },
        "scripts": {
            "type": "object",
            "propertyNames": _ACTOR,
            "additionalProperties": {
                "type": "array",
                "items": {
                    "type": "object",
                    "required": ["op"],
                    "additionalProperties": False,
                    "properties": {
                        "op": {"enum": list(OPERATIONS)},
                        "msg": {"type": "integer", "minimum": 0},
                        "target": _ACTOR,
                    },
                },
            },
        },
    },
}

TRACE_SCHEMA = {
    "$schema": "https://json-schema.org/draft/2020-12/schema",
    "title": "racelab trace",
    "type": "array",
    "items": {
        "type": "object",
        "required": ["actor", "op", "step"],
        "additionalProperties": False,
        "properties": {"actor": _ACTOR, "op": {"enum": list(OPERATIONS)}, "step": {"type": "string"}},
    },
}


@dataclass(frozen=True, eq=False)
class Scenario:
    name: str
    depth: int
    scripts: dict[str, tuple[ScriptOp, ...]]
    durability: Durability = Durability.TRANSIENT_LOCAL
    cache_refresh: str = "fused"
    members: tuple[str, ...] = ()
    messages: tuple[tuple[str, ...], ...] = ()
    params: dict = field(default_factory=dict)

    def __post_init__(self) -> None:
        extra = set(self.scripts) | set(self.members) | {a for h in self.messages for a in h}
        extra.discard(PUBLISHER)
        if len(extra) > MAX_EXTRA_PROCESSES:
            raise ValueError(f"{len(extra)} processes beyond the publisher, limit {MAX_EXTRA_PROCESSES}")
        published = len(self.messages) + sum(op.op == "publish" for ops in self.scripts.values() for op in ops)
        if published > MAX_MESSAGES:
            raise ValueError(f"{published} messages, limit {MAX_MESSAGES}")
        for actor, ops in self.scripts.items():
            for op in ops:
                if op.op in ("sub_crash_cleanup", "pub_crash_cleanup") and op.target is None:
                    raise ValueError(f"{actor}: {op.op} needs a target")
                if op.op == "release" and op.msg is None:
                    raise ValueError(f"{actor}: release needs msg")
                if op.op in ("publish", "reclaim_check", "pub_join", "pub_leave") and actor != PUBLISHER:
                    raise ValueError(f"{actor}: only the publisher may {op.op}")

    def as_dict(self) -> dict:
        return {
            "name": self.name,
            "depth": self.depth,
            "durability": self.durability.value,
            "cache_refresh": self.cache_refresh,
            "initial": {"members": list(self.members), "messages": [list(h) for h in self.messages]},
            "scripts": {a: [op.as_dict() for op in ops] for a, ops in sorted(self.scripts.items())},
        }

    def variant(self, **changes) -> "Scenario":
        name = self.name + "".join(f"[{k}={v}]" for k, v in sorted(changes.items()))
        return replace(self, name=name, **changes)


def scenario_from_dict(doc: dict) -> Scenario:
    try:
        jsonschema.validate(doc, SCENARIO_SCHEMA)
    except jsonschema.ValidationError as exc:
        raise ValueError(f"bad scenario: {exc.message}") from None
    initial = doc.get("initial", {})
    return Scenario(
        name=doc["name"],
        depth=doc["depth"],
        durability=Durability(doc.get("durability", Durability.TRANSIENT_LOCAL.value)),
        cache_refresh=doc.get("cache_refresh", "fused"),
        members=tuple(initial.get("members", ())),
        messages=tuple(tuple(h) for h in initial.get("messages", ())),
        scripts={a: tuple(ScriptOp(**op) for op in ops) for a, ops in doc["scripts"].items()},
    )


def load_scenario(spec: str) -> Scenario:
    """A built-in scenario name or a path to a scenario JSON file."""
    if spec in BUILTIN:
        return BUILTIN[spec]
    path = Path(spec)
    if not path.exists():
        raise ValueError(f"no built-in scenario or file named {spec!r}")
    return scenario_from_dict(json.loads(path.read_text()))


def validate_trace(doc) -> None:
    try:
        jsonschema.validate(doc, TRACE_SCHEMA)
    except jsonschema.ValidationError as exc:
        raise MalformedTrace(exc.message) from None


def _ops(*items) -> tuple[ScriptOp, ...]:
    return tuple(ScriptOp(i) if isinstance(i, str) else ScriptOp(**i) for i in items)


# A subscriber holding the only reference crashes while a late joiner takes
# the same message from history and the publisher runs a reclamation check.
CRASH_JOIN = Scenario(
    name="crash_join",
    depth=1,
    members=("S1",),
    messages=(("S1",),),
    scripts={
        "P": _ops("publish", "reclaim_check"),
        "S1": _ops("crash"),
        "S2": _ops("sub_join"),
        "M": _ops({"op": "sub_crash_cleanup", "target": "S1"}),
    },
)

# The publisher itself crashes; recovery frees its messages while a late
# joiner is acquiring one of them.
PUBLISHER_CRASH_JOIN = Scenario(
    name="publisher_crash_join",
    depth=1,
    messages=((),),
    scripts={
        "P": _ops("crash"),
        "S2": _ops("sub_join"),
        "M": _ops({"op": "pub_crash_cleanup", "target": "P"}),
    },
)

# A graceful release instead of a crash.
RELEASE_JOIN = Scenario(
    name="release_join",
    depth=1,
    members=("S1",),
    messages=(("S1",),),
    scripts={
        "P": _ops("publish", "reclaim_check"),
        "S1": _ops({"op": "release", "msg": 0}),
        "S2": _ops("sub_join"),
    },
)

LEAVE_JOIN = Scenario(
    name="leave_join",
    depth=1,
    members=("S1",),
    messages=(("S1",),),
    scripts={
        "P": _ops("publish", "reclaim_check"),
        "S1": _ops("sub_leave"),
        "S2": _ops("sub_join", {"op": "release", "msg": 0}),
    },
)

PUBLISHER_LEAVE_JOIN = Scenario(
    name="publisher_leave_join",
    depth=1,
    durability=Durability.VOLATILE,
    members=("S1",),
    messages=(("S1",),),
    scripts={
        "P": _ops("publish", "pub_leave"),
        "S1": _ops({"op": "release", "msg": 0}, {"op": "release", "msg": 1}),
        "S2": _ops("sub_join"),
    },
)

BUILTIN: dict[str, Scenario] = {
    s.name: s for s in (CRASH_JOIN, PUBLISHER_CRASH_JOIN, RELEASE_JOIN, LEAVE_JOIN, PUBLISHER_LEAVE_JOIN)
}


def family(base: Scenario) -> list[Scenario]:
    """The scenario under every cache-refresh placement and retention depth 1..2."""
    return [base.variant(cache_refresh=c, depth=d) for c in ("fused", "separate") for d in (1, 2)]


def all_families() -> list[Scenario]:
    return [v for s in BUILTIN.values() for v in family(s)]
