"""Depth-bounded exhaustive interleaving search with state hashing."""

from __future__ import annotations

from dataclasses import dataclass

from ..errors import BoundExceeded, MalformedTrace
from .model import (
    AbstractState,
    Arch,
    OpStep,
    ViolationKind,
    apply_step,
    enumerate_steps,
    initial_state,
    is_terminal,
    r2_violations,
)
from .scenarios import Scenario, validate_trace

DEFAULT_MAX_DEPTH = 12
DEFAULT_MAX_STATES = 10**6


@dataclass(frozen=True)
class Violation:
    kind: ViolationKind
    messages: tuple[int, ...]
    trace: tuple[OpStep, ...]

    def as_dict(self) -> dict:
        return {
            "kind": self.kind.value,
            "messages": list(self.messages),
            "trace": [s.as_dict() for s in self.trace],
        }


@dataclass
class ExploreResult:
    scenario: Scenario
    architecture: Arch
    max_depth: int
    states_visited: int
    violations: list[Violation]

    def kinds(self) -> set[ViolationKind]:
        return {v.kind for v in self.violations}

    def as_dict(self) -> dict:
        return {
            "architecture": self.architecture.value,
            "scenario": self.scenario.as_dict(),
            "max_depth": self.max_depth,
            "states_visited": self.states_visited,
            "violations": [v.as_dict() for v in self.violations],
        }


def _key(trace: tuple[OpStep, ...]) -> tuple:
    return (len(trace), trace)


def violations_at(state: AbstractState) -> list[tuple[ViolationKind, tuple[int, ...]]]:
    out = []
    r1 = state.r1_violations()
    if r1:
        out.append((ViolationKind.PREMATURE_RECLAIM, tuple(r1)))
    if is_terminal(state):
        r2 = r2_violations(state)
        if r2:
            out.append((ViolationKind.PERMANENT_LEAK, tuple(r2)))
    return out


def explore(
    scenario: Scenario,
    arch: Arch | str,
    max_depth: int = DEFAULT_MAX_DEPTH,
    max_states: int = DEFAULT_MAX_STATES,
) -> ExploreResult:
    """Visit every interleaving up to ``max_depth`` micro-steps.

    A state reached again at a smaller depth is re-expanded, so every
    violating state is reported with a shortest trace (ties broken by step
    order). Violating states are not expanded further.
    """
    arch = Arch(arch)
    root = initial_state(scenario, arch)
    best_depth: dict[AbstractState, int] = {}
    # keyed by the triggering step too: "reclaim while held" and "acquire
    # after reclaim" can reach the same state but are different races
    found: dict[tuple, Violation] = {}

    def visit(state: AbstractState, trace: tuple[OpStep, ...]) -> None:
        depth = len(trace)
        seen = best_depth.get(state)
        if seen is not None and seen <= depth:
            if seen == depth:
                _record(state, trace)
            return
        best_depth[state] = depth
        if len(best_depth) > max_states:
            raise BoundExceeded(f"more than {max_states} states")
        if _record(state, trace):
            return
        if depth >= max_depth:
            return
        for step in enumerate_steps(state):
            visit(apply_step(state, step), trace + (step,))

    def _record(state: AbstractState, trace: tuple[OpStep, ...]) -> bool:
        hits = violations_at(state)
        for kind, msgs in hits:
            key = (kind, state, trace[-1] if trace else None)
            prev = found.get(key)
            if prev is None or _key(trace) < _key(prev.trace):
                found[key] = Violation(kind, msgs, trace)
        return any(kind is ViolationKind.PREMATURE_RECLAIM for kind, _ in hits)

    visit(root, ())
    violations = sorted(found.values(), key=lambda v: (v.kind.value, len(v.trace), v.trace, v.messages))
    return ExploreResult(scenario, arch, max_depth, len(best_depth), violations)


def _coerce(step) -> OpStep:
    if isinstance(step, OpStep):
        return step
    if isinstance(step, dict):
        validate_trace([step])
        return OpStep(step["actor"], step["op"], step["step"])
    raise MalformedTrace(f"not a trace step: {step!r}")


def replay(scenario: Scenario, arch: Arch | str, trace) -> AbstractState:
    """Re-execute a trace from the scenario's initial state."""
    if not isinstance(trace, (list, tuple)):
        raise MalformedTrace("trace must be a list of steps")
    state = initial_state(scenario, Arch(arch))
    for i, raw in enumerate(trace):
        step = _coerce(raw)
        try:
            state = apply_step(state, step)
        except ValueError as exc:
            raise MalformedTrace(f"step {i}: {exc}") from None
    return state
