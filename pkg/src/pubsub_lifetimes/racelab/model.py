"""Abstract state machine for the two metadata architectures.

One publisher ``P`` owns every message; subscribers and a crash monitor run
short scripts of metadata-modifying operations. The state keeps two views of
who holds each message:

* ``holders``: what the modeled protocol believes (the data plane).
* ``live_refs``: ground truth, maintained by the model itself. Protocol
  logic never reads it; the safety predicates do.

Under ``SINGLE_WRITER`` each operation is one atomic step. Under
``OWNER_DRIVEN`` every operation that reads or writes both planes is split
into one step per plane access, so other actors can interleave between them.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, field, replace
from typing import TYPE_CHECKING

if TYPE_CHECKING:
    from .scenarios import Scenario

PUBLISHER = "P"


class Arch(str, enum.Enum):
    SINGLE_WRITER = "single-writer"
    OWNER_DRIVEN = "owner-driven"


class Durability(str, enum.Enum):
    VOLATILE = "volatile"
    TRANSIENT_LOCAL = "transient_local"


class ViolationKind(str, enum.Enum):
    PREMATURE_RECLAIM = "PrematureReclaim"  # R1
    PERMANENT_LEAK = "PermanentLeak"  # R2


# the nine metadata-modifying operations, plus the crash event itself
OPERATIONS = (
    "sub_join",
    "sub_leave",
    "sub_crash_cleanup",
    "pub_join",
    "pub_leave",
    "pub_crash_cleanup",
    "publish",
    "reclaim_check",
    "release",
    "crash",
)


@dataclass(frozen=True, order=True)
class ScriptOp:
    op: str
    msg: int | None = None  # release
    target: str | None = None  # crash cleanup

    def as_dict(self) -> dict:
        out: dict = {"op": self.op}
        if self.msg is not None:
            out["msg"] = self.msg
        if self.target is not None:
            out["target"] = self.target
        return out


@dataclass(frozen=True, order=True)
class OpStep:
    actor: str
    op: str
    step: str

    def as_dict(self) -> dict:
        return {"actor": self.actor, "op": self.op, "step": self.step}


def micro_steps(arch: Arch, op: str, cache_refresh: str) -> tuple[str, ...]:
    """Decomposition of one operation into plane accesses."""
    if arch is Arch.SINGLE_WRITER:
        return (op,)
    separate = cache_refresh == "separate"
    table = {
        "sub_join": ("join_register",) + (("join_cache_refresh",) if separate else ()) + ("join_acquire",),
        "sub_leave": ("leave_release", "leave_deregister") + (("leave_cache_refresh",) if separate else ()),
        "sub_crash_cleanup": ("cleanup_deregister",)
        + (("cleanup_cache_refresh",) if separate else ())
        + ("cleanup_clear_refs",),
        "pub_join": ("pub_register",),
        "pub_leave": ("pl_read_data", "pl_decide"),
        "pub_crash_cleanup": ("rec_read_data", "rec_decide"),
        "publish": ("publish",),
        "reclaim_check": ("rc_read_data", "rc_decide"),
        "release": ("release",),
        "crash": ("crash",),
    }
    return table[op]


@dataclass(frozen=True)
class AbstractState:
    architecture: Arch
    pcs: tuple[tuple[str, int, int], ...]  # (actor, script index, micro-step index)
    members: frozenset[str]
    cache: frozenset[str]  # the publisher's subscriber-list cache (owner-driven only)
    holders: tuple[frozenset[str], ...]
    live_refs: tuple[frozenset[str], ...]
    reclaimed: frozenset[int]
    crashed: frozenset[str]
    publisher_alive: bool
    retention_owner: str | None  # "P", "broker" or None
    scratch: tuple[tuple[str, tuple], ...] = ()  # per-actor values read by an unfinished op
    scenario: "Scenario" = field(default=None, compare=False, hash=False, repr=False)  # type: ignore[assignment]

    # --- derived views ------------------------------------------------------
    def newer(self, m: int) -> int:
        return len(self.holders) - 1 - m

    def retention_required(self, m: int) -> bool:
        return self.retention_owner is not None and self.newer(m) < self.scenario.depth

    def r1_violations(self) -> list[int]:
        return sorted(m for m in self.reclaimed if self.live_refs[m])

    def as_dict(self) -> dict:
        return {
            "architecture": self.architecture.value,
            "pcs": [list(p) for p in self.pcs],
            "members": sorted(self.members),
            "cache": sorted(self.cache),
            "holders": [sorted(h) for h in self.holders],
            "live_refs": [sorted(h) for h in self.live_refs],
            "reclaimed": sorted(self.reclaimed),
            "crashed": sorted(self.crashed),
            "publisher_alive": self.publisher_alive,
            "retention_owner": self.retention_owner,
        }


def initial_state(scenario: "Scenario", arch: Arch) -> AbstractState:
    members = frozenset(scenario.members)
    holders = tuple(frozenset(h) for h in scenario.messages)
    return AbstractState(
        architecture=arch,
        pcs=tuple((actor, 0, 0) for actor in sorted(scenario.scripts)),
        members=members,
        cache=members,
        holders=holders,
        live_refs=holders,
        reclaimed=frozenset(),
        crashed=frozenset(),
        publisher_alive=True,
        retention_owner=PUBLISHER,
        scenario=scenario,
    )


# --------------------------------------------------------------------------
# step enumeration


def _current(state: AbstractState, actor: str, idx: int, micro: int) -> tuple[ScriptOp, str] | None:
    script = state.scenario.scripts[actor]
    if idx >= len(script):
        return None
    op = script[idx]
    steps = micro_steps(state.architecture, op.op, state.scenario.cache_refresh)
    return op, steps[micro]


def _enabled(state: AbstractState, actor: str, op: ScriptOp) -> bool:
    if actor in state.crashed:
        return False
    if op.op in ("sub_crash_cleanup", "pub_crash_cleanup"):
        return op.target in state.crashed
    if actor == PUBLISHER and op.op not in ("pub_join", "crash"):
        return state.publisher_alive
    return True


def enumerate_steps(state: AbstractState) -> list[OpStep]:
    """Every architecture-legal next micro-step, ordered by actor."""
    out = []
    for actor, idx, micro in state.pcs:
        cur = _current(state, actor, idx, micro)
        if cur is None:
            continue
        op, step = cur
        if _enabled(state, actor, op):
            out.append(OpStep(actor, op.op, step))
    return out


def is_terminal(state: AbstractState) -> bool:
    """All scripts finished (crashed actors count as finished)."""
    return all(
        actor in state.crashed or idx >= len(state.scenario.scripts[actor]) for actor, idx, _ in state.pcs
    )


# --------------------------------------------------------------------------
# transitions


def _without(sets: tuple[frozenset[str], ...], who: str) -> tuple[frozenset[str], ...]:
    return tuple(s - {who} for s in sets)


def _add(sets: tuple[frozenset[str], ...], ms, who: str) -> tuple[frozenset[str], ...]:
    ms = set(ms)
    return tuple(s | {who} if i in ms else s for i, s in enumerate(sets))


def _set_scratch(state: AbstractState, actor: str, value: tuple | None) -> tuple:
    rest = tuple(kv for kv in state.scratch if kv[0] != actor)
    if value is None:
        return rest
    return tuple(sorted(rest + ((actor, value),)))


def _scratch(state: AbstractState, actor: str) -> tuple:
    for k, v in state.scratch:
        if k == actor:
            return v
    raise KeyError(actor)


def _history(state: AbstractState) -> tuple[int, ...]:
    """Messages a Transient Local joiner should receive right now."""
    sc = state.scenario
    if sc.durability is not Durability.TRANSIENT_LOCAL or state.retention_owner is None:
        return ()
    retained = [m for m in range(len(state.holders)) if m not in state.reclaimed]
    return tuple(retained[-sc.depth :])


def _sweep(state: AbstractState) -> frozenset[int]:
    """Single-writer reclamation rule over the whole topic."""
    freed = {
        m
        for m in range(len(state.holders))
        if m not in state.reclaimed and not state.holders[m] and not state.retention_required(m)
    }
    return state.reclaimed | freed


def _owner_decide(state: AbstractState, snapshot: tuple[frozenset[str], ...], retain: bool) -> frozenset[int]:
    # reference set read earlier, membership read now; orphaned holders are ignored
    freed = set()
    for m, seen in enumerate(snapshot):
        if m in state.reclaimed:
            continue
        if seen & state.members:
            continue
        if retain and state.retention_required(m):
            continue
        freed.add(m)
    return state.reclaimed | freed


def _apply_single_writer(s: AbstractState, actor: str, op: ScriptOp) -> AbstractState:
    name = op.op
    if name == "publish":
        receivers = s.members - s.crashed
        s = replace(s, holders=s.holders + (receivers,), live_refs=s.live_refs + (receivers,))
        return replace(s, reclaimed=_sweep(s))
    if name == "reclaim_check":
        return replace(s, reclaimed=_sweep(s))
    if name == "release":
        return replace(
            s,
            holders=tuple(h - {actor} if i == op.msg else h for i, h in enumerate(s.holders)),
            live_refs=tuple(h - {actor} if i == op.msg else h for i, h in enumerate(s.live_refs)),
        )
    if name == "sub_join":
        hist = _history(s)
        return replace(
            s,
            members=s.members | {actor},
            holders=_add(s.holders, hist, actor),
            live_refs=_add(s.live_refs, hist, actor),
        )
    if name == "sub_leave":
        s = replace(
            s,
            members=s.members - {actor},
            holders=_without(s.holders, actor),
            live_refs=_without(s.live_refs, actor),
        )
        return replace(s, reclaimed=_sweep(s))
    if name == "sub_crash_cleanup":
        s = replace(s, members=s.members - {op.target}, holders=_without(s.holders, op.target))
        return replace(s, reclaimed=_sweep(s))
    if name in ("pub_leave", "pub_crash_cleanup"):
        # the broker takes over Transient Local retention
        owner = "broker" if s.scenario.durability is Durability.TRANSIENT_LOCAL else None
        s = replace(s, publisher_alive=False, retention_owner=owner)
        return replace(s, reclaimed=_sweep(s))
    if name == "pub_join":
        return replace(s, publisher_alive=True, retention_owner=PUBLISHER)
    if name == "crash":
        return _crash(s, actor)
    raise AssertionError(name)


def _crash(s: AbstractState, actor: str) -> AbstractState:
    s = replace(s, crashed=s.crashed | {actor}, live_refs=_without(s.live_refs, actor), scratch=_set_scratch(s, actor, None))
    if actor == PUBLISHER:
        s = replace(s, publisher_alive=False)
        if s.architecture is Arch.OWNER_DRIVEN:
            # retention died with its owner: the service continuity gap
            s = replace(s, retention_owner=None)
    return s


def _refresh(s: AbstractState) -> frozenset[str]:
    return s.members if s.publisher_alive else s.cache


def _apply_owner_driven(s: AbstractState, actor: str, op: ScriptOp, step: str) -> AbstractState:
    fused = s.scenario.cache_refresh == "fused"
    if step == "publish":
        # the reference set comes from the (possibly stale) cache
        delivered = s.cache & s.members - s.crashed
        return replace(s, holders=s.holders + (s.cache,), live_refs=s.live_refs + (delivered,))
    if step in ("rc_read_data", "pl_read_data", "rec_read_data"):
        return replace(s, scratch=_set_scratch(s, actor, s.holders))
    if step == "rc_decide":
        snap = _scratch(s, actor)
        return replace(s, reclaimed=_owner_decide(s, snap, retain=True), scratch=_set_scratch(s, actor, None))
    if step in ("pl_decide", "rec_decide"):
        snap = _scratch(s, actor)
        s = replace(s, publisher_alive=False, retention_owner=None)
        return replace(s, reclaimed=_owner_decide(s, snap, retain=False), scratch=_set_scratch(s, actor, None))
    if step == "release":
        return _apply_single_writer(s, actor, op)
    if step == "join_register":
        hist = _history(s) if s.publisher_alive else ()
        s = replace(s, members=s.members | {actor}, scratch=_set_scratch(s, actor, hist))
        return replace(s, cache=_refresh(s)) if fused else s
    if step in ("join_cache_refresh", "leave_cache_refresh", "cleanup_cache_refresh"):
        return replace(s, cache=_refresh(s))
    if step == "join_acquire":
        hist = _scratch(s, actor)
        return replace(
            s,
            holders=_add(s.holders, hist, actor),
            live_refs=_add(s.live_refs, hist, actor),
            scratch=_set_scratch(s, actor, None),
        )
    if step == "leave_release":
        return replace(s, holders=_without(s.holders, actor), live_refs=_without(s.live_refs, actor))
    if step == "leave_deregister":
        s = replace(s, members=s.members - {actor})
        return replace(s, cache=_refresh(s)) if fused else s
    if step == "cleanup_deregister":
        s = replace(s, members=s.members - {op.target})
        return replace(s, cache=_refresh(s)) if fused else s
    if step == "cleanup_clear_refs":
        return replace(s, holders=_without(s.holders, op.target))
    if step == "pub_register":
        return replace(s, publisher_alive=True, retention_owner=PUBLISHER, cache=s.members)
    if step == "crash":
        return _crash(s, actor)
    raise AssertionError(step)


def apply_step(state: AbstractState, step: OpStep) -> AbstractState:
    """Execute one enabled micro-step. Raises ``ValueError`` if it is not enabled."""
    pcs = list(state.pcs)
    for k, (actor, idx, micro) in enumerate(pcs):
        if actor == step.actor:
            break
    else:
        raise ValueError(f"unknown actor {step.actor!r}")
    cur = _current(state, actor, idx, micro)
    if cur is None or cur[1] != step.step or cur[0].op != step.op or not _enabled(state, actor, cur[0]):
        raise ValueError(f"step {step} is not enabled")
    op = cur[0]
    if state.architecture is Arch.SINGLE_WRITER:
        nxt = _apply_single_writer(state, actor, op)
    else:
        nxt = _apply_owner_driven(state, actor, op, step.step)
    n_steps = len(micro_steps(state.architecture, op.op, state.scenario.cache_refresh))
    pcs[k] = (actor, idx + 1, 0) if micro + 1 >= n_steps else (actor, idx, micro + 1)
    return replace(nxt, pcs=tuple(pcs))


# --------------------------------------------------------------------------
# liveness


def eventual_reclaim(state: AbstractState) -> frozenset[int]:
    """What the architecture would still reclaim if nothing else happened."""
    if state.architecture is Arch.SINGLE_WRITER:
        return _sweep(state)
    if state.publisher_alive:
        return _owner_decide(state, state.holders, retain=True)
    return state.reclaimed  # nobody left to run a reclamation check


def r2_violations(state: AbstractState) -> list[int]:
    """At a terminal state: released, unretained messages that will never be freed."""
    final = eventual_reclaim(state)
    return sorted(
        m
        for m in range(len(state.holders))
        if m not in final and not state.live_refs[m] and not state.retention_required(m)
    )
