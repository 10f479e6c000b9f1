import json

import jsonschema
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from pubsub_lifetimes.errors import BoundExceeded, MalformedTrace
from pubsub_lifetimes.racelab import (
    BUILTIN,
    Arch,
    OpStep,
    ViolationKind,
    all_families,
    apply_step,
    enumerate_steps,
    explore,
    initial_state,
    replay,
    scenario_from_dict,
    violations_at,
)
from pubsub_lifetimes.racelab.cli import main
from pubsub_lifetimes.racelab.model import micro_steps
from pubsub_lifetimes.racelab.scenarios import TRACE_SCHEMA

OD, SW = Arch.OWNER_DRIVEN, Arch.SINGLE_WRITER
R1 = ViolationKind.PREMATURE_RECLAIM


def test_initial_steps_include_join_and_publish():
    steps = enumerate_steps(initial_state(BUILTIN["crash_join"], OD))
    assert OpStep("S2", "sub_join", "join_register") in steps
    assert OpStep("P", "publish", "publish") in steps
    # the cleanup is not enabled before anything has crashed
    assert not [s for s in steps if s.actor == "M"]


def test_single_writer_ops_are_single_fused_steps():
    for scenario in BUILTIN.values():
        state = initial_state(scenario, SW)
        for step in enumerate_steps(state):
            assert step.step == step.op
    for op in ("sub_join", "reclaim_check", "pub_crash_cleanup", "sub_leave"):
        assert micro_steps(SW, op, "separate") == (op,)


def test_owner_driven_dual_plane_ops_decompose():
    assert micro_steps(OD, "reclaim_check", "fused") == ("rc_read_data", "rc_decide")
    for op in ("sub_join", "sub_leave", "sub_crash_cleanup", "pub_leave", "pub_crash_cleanup", "reclaim_check"):
        assert len(micro_steps(OD, op, "fused")) >= 2
    for op in ("publish", "release", "pub_join"):
        assert len(micro_steps(OD, op, "fused")) == 1
    assert len(micro_steps(OD, "sub_join", "separate")) == 3


def _is_narrative(trace):
    names = [(s.actor, s.step) for s in trace]
    pos = {n: i for i, n in enumerate(names)}
    return (
        names[-1] == ("P", "rc_decide")
        and pos[("P", "rc_read_data")] < pos[("S2", "join_acquire")] < pos[("P", "rc_decide")]
        and pos[("S1", "crash")] < pos[("P", "rc_decide")]
    )


def test_crash_join_premature_reclaim_on_owner_driven():
    result = explore(BUILTIN["crash_join"], OD, max_depth=12)
    r1 = [v for v in result.violations if v.kind is R1]
    assert r1 and all(len(v.trace) <= 12 for v in r1)
    # publisher reads the data plane, S1 dies, S2 takes history, publisher reclaims
    assert any(_is_narrative(v.trace) for v in r1)


def test_crash_join_safe_on_single_writer():
    result = explore(BUILTIN["crash_join"], SW, max_depth=12)
    assert result.violations == []
    assert result.states_visited > 1


def test_publisher_crash_variant():
    assert R1 in explore(BUILTIN["publisher_crash_join"], OD).kinds()
    assert explore(BUILTIN["publisher_crash_join"], SW).violations == []


def test_single_writer_safe_over_every_family():
    total = 0
    for scenario in all_families():
        result = explore(scenario, SW)
        assert result.violations == [], scenario.name
        total += result.states_visited
    assert total <= 10**6


def test_owner_driven_naive_model_breaks_r1_on_crash_join_family():
    hits = [R1 in explore(s, OD).kinds() for s in all_families() if s.name.startswith("crash_join")]
    assert any(hits)


def test_soundness_every_violation_replays():
    for scenario in all_families():
        for arch in Arch:
            for v in explore(scenario, arch).violations:
                state = replay(scenario, arch, v.trace)
                assert v.kind in {k for k, _ in violations_at(state)}


def test_determinism():
    a = explore(BUILTIN["leave_join"].variant(cache_refresh="separate"), OD)
    b = explore(BUILTIN["leave_join"].variant(cache_refresh="separate"), OD)
    assert json.dumps(a.as_dict()) == json.dumps(b.as_dict())


def test_replay_empty_trace_is_initial_state():
    sc = BUILTIN["crash_join"]
    assert replay(sc, OD, []) == initial_state(sc, OD)


def test_replay_rejects_malformed_traces():
    sc = BUILTIN["crash_join"]
    with pytest.raises(MalformedTrace):
        replay(sc, OD, [{"actor": "P", "op": "publish", "step": "rc_decide"}])
    with pytest.raises(MalformedTrace):
        replay(sc, OD, [{"actor": "M", "op": "sub_crash_cleanup", "step": "cleanup_deregister"}])
    with pytest.raises(MalformedTrace):
        replay(sc, OD, [{"who": "P"}])
    with pytest.raises(MalformedTrace):
        replay(sc, OD, "not a list")


def test_permuted_independent_steps_commute():
    sc = BUILTIN["release_join"]
    a = [OpStep("S1", "release", "release"), OpStep("S2", "sub_join", "join_register")]
    sa, sb = replay(sc, OD, a), replay(sc, OD, a[::-1])
    # equal under the explorer's state hashing
    assert sa == sb and hash(sa) == hash(sb)
    dependent = [OpStep("P", "publish", "publish"), OpStep("S2", "sub_join", "join_register")]
    assert replay(sc, OD, dependent) != replay(sc, OD, dependent[::-1])


def test_bound_exceeded():
    with pytest.raises(BoundExceeded):
        explore(BUILTIN["leave_join"], OD, max_states=5)


def test_scenario_json_roundtrip_and_bounds():
    sc = BUILTIN["crash_join"]
    again = scenario_from_dict(json.loads(json.dumps(sc.as_dict())))
    assert explore(again, OD).as_dict() == explore(sc, OD).as_dict()
    doc = sc.as_dict()
    doc["scripts"]["S3"] = [{"op": "sub_join"}]
    doc["scripts"]["S4"] = [{"op": "sub_join"}]
    with pytest.raises(ValueError):
        scenario_from_dict(doc)
    with pytest.raises(ValueError):
        scenario_from_dict({"name": "x", "depth": 0, "scripts": {}})


def test_cli_writes_replayable_trace(tmp_path, capsys):
    out = tmp_path / "trace.json"
    assert main(["--arch", "owner-driven", "--scenario", "crash_join", "--max-depth", "12", "--out", str(out)]) == 0
    doc = json.loads(out.read_text())
    assert doc["violations"] and doc["states_visited"] > 0
    for v in doc["violations"]:
        jsonschema.validate(v["trace"], TRACE_SCHEMA)
    assert main(["--replay", str(out)]) == 0
    custom = tmp_path / "sc.json"
    custom.write_text(json.dumps(BUILTIN["release_join"].as_dict()))
    assert main(["--arch", "single-writer", "--scenario", str(custom)]) == 0
    assert "0 violations" in capsys.readouterr().out


@settings(max_examples=200, deadline=None)
@given(st.sampled_from(sorted(BUILTIN)), st.sampled_from(list(Arch)), st.lists(st.integers(0, 10), max_size=14))
def test_random_walks_respect_enumeration(name, arch, picks):
    state = initial_state(BUILTIN[name], arch)
    for p in picks:
        steps = enumerate_steps(state)
        if not steps:
            break
        state = apply_step(state, steps[p % len(steps)])
        if arch is SW:
            assert state.r1_violations() == []
            # the single writer's reference set never misses a live holder
            assert all(live <= held for live, held in zip(state.live_refs, state.holders))
