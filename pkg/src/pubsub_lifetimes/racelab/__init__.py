"""Interleaving explorer contrasting single-writer and owner-driven metadata."""

from .explore import ExploreResult, Violation, explore, replay, violations_at
from .model import (
    AbstractState,
    Arch,
    Durability,
    OpStep,
    ScriptOp,
    ViolationKind,
    apply_step,
    enumerate_steps,
    initial_state,
    is_terminal,
)
from .scenarios import BUILTIN, Scenario, all_families, family, load_scenario, scenario_from_dict

__all__ = [
    "BUILTIN",
    "AbstractState",
    "Arch",
    "Durability",
    "ExploreResult",
    "OpStep",
    "Scenario",
    "ScriptOp",
    "Violation",
    "ViolationKind",
    "all_families",
    "apply_step",
    "enumerate_steps",
    "explore",
    "family",
    "initial_state",
    "is_terminal",
    "load_scenario",
    "replay",
    "scenario_from_dict",
    "violations_at",
]
