import threading

import pytest

from pubsub_lifetimes.arena import ArenaRef
from pubsub_lifetimes.broker import Broker, QoS, snapshot_bytes
from pubsub_lifetimes.errors import (
    BitNotSet,
    IdSpaceExhausted,
    TopicGone,
    UnknownEndpoint,
    UnknownEntry,
    UnknownTopic,
)

from .refsim import TRANSIENT_LOCAL, VOLATILE, RefSim

TL = QoS.transient_local
VOL = QoS.volatile


def ref(n: int) -> ArenaRef:
    return ArenaRef(1, n * 8, 8, n)


def entry_ids(broker, topic="t"):
    return [e["entry_id"] for e in broker.snapshot(topic)["entries"]]


# registration --------------------------------------------------------------------


def test_first_registration_creates_topic():
    b = Broker()
    assert b.snapshot() == {"topics": [], "counters": b.counters().as_dict()}
    assert b.register_publisher("t", VOL(), pid=1) == 0
    assert b.topics() == ["t"]


def test_id_space_exhausted_after_width():
    b = Broker()
    for i in range(64):
        assert b.register_subscriber("t", VOL(), pid=i)[0] == i
    with pytest.raises(IdSpaceExhausted):
        b.register_subscriber("t", VOL(), pid=99)


def test_local_ids_never_reused():
    b = Broker(max_subscribers_per_topic=4)
    b.register_publisher("t", TL(1), 1)
    sid, _ = b.register_subscriber("t", VOL(), 2)
    b.unregister_subscriber("t", sid)
    sid2, _ = b.register_subscriber("t", VOL(), 3)
    assert sid2 == sid + 1


def test_two_publishers_share_one_entry_sequence():
    b = Broker()
    p0 = b.register_publisher("t", VOL(5), 1)
    p1 = b.register_publisher("t", VOL(5), 2)
    assert p0 != p1
    log = [p0, p1, p1, p0, p1]
    ids = [b.publish_entry("t", p, ref(i)).entry_id for i, p in enumerate(log)]
    # oracle: sequential replay of the publish log
    sim = RefSim()
    sim.register_publisher("t", VOLATILE, 5, 1)
    sim.register_publisher("t", VOLATILE, 5, 2)
    assert ids == [sim.publish("t", p, ref(i))[0] for i, p in enumerate(log)] == [1, 2, 3, 4, 5]
    pubs = [e["publisher"] for e in b.snapshot("t")["entries"]]
    assert pubs == log


def test_volatile_join_sees_only_future():
    b = Broker()
    p = b.register_publisher("t", TL(5), 1)
    for i in range(3):
        b.publish_entry("t", p, ref(i))
    sid, wm = b.register_subscriber("t", VOL(), 2)
    assert wm == 3
    assert b.receive_entries("t", sid) == []


def test_transient_local_join_gets_all_retained_when_depth_larger():
    b = Broker()
    p = b.register_publisher("t", TL(5), 1)
    b.publish_entry("t", p, ref(1))
    b.publish_entry("t", p, ref(2))
    sid, _ = b.register_subscriber("t", TL(5), 2)
    assert [e.entry_id for e in b.receive_entries("t", sid)] == [1, 2]


def test_transient_local_join_depth_one():
    b = Broker()
    p = b.register_publisher("t", TL(2), 1)
    for i in range(5):
        b.publish_entry("t", p, ref(i))
    assert entry_ids(b) == [4, 5]
    sid, wm = b.register_subscriber("t", TL(1), 2)
    # oracle: reference simulator replay
    sim = RefSim()
    sim.register_publisher("t", TRANSIENT_LOCAL, 2, 1)
    for i in range(5):
        sim.publish("t", 0, ref(i))
    assert sim.register_subscriber("t", TRANSIENT_LOCAL, 1, 2) == (sid, wm)
    assert [e.entry_id for e in b.receive_entries("t", sid)] == [5]


# publish / eviction ------------------------------------------------------------------


def test_depth_one_evicts_previous_unreferenced():
    b = Broker()
    p = b.register_publisher("t", VOL(1), 1)
    b.publish_entry("t", p, ref(1))
    res = b.publish_entry("t", p, ref(2))
    assert res.evicted == [ref(1)]
    assert entry_ids(b) == [2]


def test_referenced_entry_survives_depth():
    b = Broker()
    p = b.register_publisher("t", VOL(1), 1)
    s, _ = b.register_subscriber("t", VOL(), 2)
    b.publish_entry("t", p, ref(1))
    b.receive_entries("t", s)
    res = b.publish_entry("t", p, ref(2))
    assert res.evicted == []
    assert entry_ids(b) == [1, 2]


def test_depth_three_keeps_three_newest():
    b = Broker()
    p = b.register_publisher("t", VOL(3), 1)
    for i in range(1, 6):
        b.publish_entry("t", p, ref(i))
    sim = RefSim()
    sim.register_publisher("t", VOLATILE, 3, 1)
    for i in range(1, 6):
        sim.publish("t", 0, ref(i))
    assert entry_ids(b) == [e[0] for e in sim.tree("t")] == [3, 4, 5]


def test_publish_returns_current_subscribers_and_counts():
    b = Broker()
    p = b.register_publisher("t", VOL(1), 1)
    s1, _ = b.register_subscriber("t", VOL(), 2)
    s2, _ = b.register_subscriber("t", VOL(), 3)
    res = b.publish_entry("t", p, ref(1))
    assert res.entry_id == 1 and res.subscriber_ids == [s1, s2]
    assert b.counters("t").publish_ops == 1


def test_publish_errors():
    b = Broker()
    with pytest.raises(TopicGone):
        b.publish_entry("nope", 0, ref(1))
    b.register_subscriber("t", VOL(), 1)
    with pytest.raises(UnknownEndpoint):
        b.publish_entry("t", 5, ref(1))


# receive / release ----------------------------------------------------------------------


def test_receive_sets_bits_and_advances_watermark():
    b = Broker()
    p = b.register_publisher("t", VOL(5), 1)
    s, _ = b.register_subscriber("t", VOL(), 2)
    for i in range(3):
        b.publish_entry("t", p, ref(i))
    got = b.receive_entries("t", s)
    assert [e.entry_id for e in got] == [1, 2, 3]
    snap = b.snapshot("t")
    assert all(e["bitmap"] == 1 << s for e in snap["entries"])
    assert snap["subscribers"][0]["watermark"] == 3
    assert b.receive_entries("t", s) == []


def test_release_clears_bit_without_evicting():
    b = Broker()
    p = b.register_publisher("t", VOL(1), 1)
    s, _ = b.register_subscriber("t", VOL(), 2)
    b.publish_entry("t", p, ref(1))
    b.receive_entries("t", s)
    b.publish_entry("t", p, ref(2))
    b.release_reference("t", s, 1)
    assert b.snapshot("t")["entries"][0]["bitmap"] == 0
    assert entry_ids(b) == [1, 2]  # no deallocation on release
    with pytest.raises(BitNotSet):
        b.release_reference("t", s, 1)
    # the next publish by the same publisher evicts it
    res = b.publish_entry("t", p, ref(3))
    assert ref(1) in res.evicted


def test_release_errors():
    b = Broker()
    p = b.register_publisher("t", VOL(1), 1)
    s, _ = b.register_subscriber("t", VOL(), 2)
    with pytest.raises(UnknownEntry):
        b.release_reference("t", s, 42)
    with pytest.raises(UnknownEndpoint):
        b.release_reference("t", 9, 1)
    with pytest.raises(UnknownEndpoint):
        b.receive_entries("zzz", 0)


# membership ---------------------------------------------------------------------------


def test_sole_holder_leaving_evicts_entry():
    b = Broker()
    p = b.register_publisher("t", VOL(1), 1)
    s, _ = b.register_subscriber("t", VOL(), 2)
    b.publish_entry("t", p, ref(7))
    b.receive_entries("t", s)
    b.publish_entry("t", p, ref(8))
    assert b.unregister_subscriber("t", s) == [ref(7)]
    assert entry_ids(b) == [2]


def test_leave_with_no_bits_evicts_nothing():
    b = Broker()
    p = b.register_publisher("t", VOL(2), 1)
    s, _ = b.register_subscriber("t", VOL(), 2)
    b.publish_entry("t", p, ref(1))
    assert b.unregister_subscriber("t", s) == []
    with pytest.raises(UnknownEndpoint):
        b.unregister_subscriber("t", s)


def test_leave_while_other_holds_retains():
    b = Broker()
    p = b.register_publisher("t", VOL(1), 1)
    s1, _ = b.register_subscriber("t", VOL(), 2)
    s2, _ = b.register_subscriber("t", VOL(), 3)
    b.publish_entry("t", p, ref(1))
    b.receive_entries("t", s1)
    b.receive_entries("t", s2)
    b.publish_entry("t", p, ref(2))
    assert b.unregister_subscriber("t", s1) == []
    assert entry_ids(b) == [1, 2]


def test_transient_local_publisher_leave_keeps_history():
    b = Broker()
    p = b.register_publisher("t", TL(3), 1)
    for i in range(5):
        b.publish_entry("t", p, ref(i))
    assert b.unregister_publisher("t", p) == []
    assert entry_ids(b) == [3, 4, 5]
    s, _ = b.register_subscriber("t", TL(3), 2)
    assert [e.entry_id for e in b.receive_entries("t", s)] == [3, 4, 5]


def test_volatile_publisher_leave_evicts_unreferenced():
    b = Broker()
    p = b.register_publisher("t", VOL(3), 1)
    s, _ = b.register_subscriber("t", VOL(), 9)
    for i in range(3):
        b.publish_entry("t", p, ref(i))
    sim = RefSim()
    sim.register_publisher("t", VOLATILE, 3, 1)
    sim.register_subscriber("t", VOLATILE, 1, 9)
    for i in range(3):
        sim.publish("t", 0, ref(i))
    assert b.unregister_publisher("t", p) == sim.unregister_publisher("t", 0) == [ref(0), ref(1), ref(2)]
    assert entry_ids(b) == []


def test_publisher_leave_while_held_retains_until_release():
    b = Broker()
    p = b.register_publisher("t", VOL(1), 1)
    s, _ = b.register_subscriber("t", VOL(), 2)
    b.publish_entry("t", p, ref(1))
    b.receive_entries("t", s)
    assert b.unregister_publisher("t", p) == []
    assert entry_ids(b) == [1]
    b.release_reference("t", s, 1)
    assert entry_ids(b) == [1]  # release never evicts
    assert b.unregister_subscriber("t", s) == [ref(1)]
    assert b.topics() == []  # empty topic is dropped


def test_subscriber_crash_across_two_topics():
    b = Broker()
    sim = RefSim()
    for topic in ("a", "b"):
        b.register_publisher(topic, VOL(1), 1)
        sim.register_publisher(topic, VOLATILE, 1, 1)
        b.register_subscriber(topic, VOL(), 2)
        sim.register_subscriber(topic, VOLATILE, 1, 2)
    n = 0
    for topic, count in (("a", 3), ("b", 2)):
        for _ in range(count):
            n += 1
            b.publish_entry(topic, 0, ref(n))
            sim.publish(topic, 0, ref(n))
            b.receive_entries(topic, 1)
            sim.receive(topic, 1)
    held = sum(bin(e["bitmap"]).count("1") for t in b.snapshot()["topics"] for e in t["entries"])
    assert held == 5
    evicted = b.handle_process_exit(2)
    assert sorted(evicted) == sorted(sim.process_exit(2))
    for topic in ("a", "b"):
        assert all(e["bitmap"] == 0 for e in b.snapshot(topic)["entries"])
        assert [e["entry_id"] for e in b.snapshot(topic)["entries"]] == [x[0] for x in sim.tree(topic)]
    assert b.handle_process_exit(12345) == []


def test_crashed_transient_local_publisher_history_survives():
    b = Broker()
    p = b.register_publisher("t", TL(2), 1)
    for i in range(4):
        b.publish_entry("t", p, ref(i))
    b.handle_process_exit(1)
    s, _ = b.register_subscriber("t", TL(5), 2)
    assert [e.entry_id for e in b.receive_entries("t", s)] == [3, 4]


# snapshot / instrumentation --------------------------------------------------------------


def test_snapshot_bitmap_after_two_receives():
    b = Broker()
    p = b.register_publisher("t", VOL(1), 1)
    s1, _ = b.register_subscriber("t", VOL(), 2)
    s2, _ = b.register_subscriber("t", VOL(), 3)
    b.publish_entry("t", p, ref(1))
    b.receive_entries("t", s1)
    b.receive_entries("t", s2)
    assert bin(b.snapshot("t")["entries"][0]["bitmap"]).count("1") == 2
    with pytest.raises(UnknownTopic):
        b.snapshot("missing")
    assert snapshot_bytes(b.snapshot()) == snapshot_bytes(b.snapshot())


def test_lock_modes_recorded():
    b = Broker(record_locks=True)
    p = b.register_publisher("t", VOL(1), 1)
    s, _ = b.register_subscriber("t", VOL(), 2)
    b.publish_entry("t", p, ref(1))
    b.receive_entries("t", s)
    b.release_reference("t", s, 1)
    b.unregister_subscriber("t", s)
    b.handle_process_exit(1)
    assert b.lock_log == [
        ("register_publisher", "WRITE", "-"),
        ("register_subscriber", "WRITE", "-"),
        ("publish", "READ", "WRITE"),
        ("receive", "READ", "READ"),
        ("release", "READ", "READ"),
        ("unregister_subscriber", "WRITE", "-"),
        ("process_exit", "WRITE", "-"),
    ]


def test_membership_serialised_against_data_path():
    """Debug generation checks never fire while threads mix membership and data ops."""
    b = Broker(debug=True, max_subscribers_per_topic=10**6)
    stop = threading.Event()
    errors = []

    def churn():
        try:
            while not stop.is_set():
                sid, _ = b.register_subscriber("u", VOL(), 5)
                b.unregister_subscriber("u", sid)
        except Exception as exc:  # pragma: no cover - surfaced below
            errors.append(exc)

    p = b.register_publisher("t", VOL(2), 1)
    s, _ = b.register_subscriber("t", VOL(), 2)
    t = threading.Thread(target=churn)
    t.start()
    try:
        for i in range(2000):
            b.publish_entry("t", p, ref(i))
            for e in b.receive_entries("t", s):
                b.release_reference("t", s, e.entry_id)
    finally:
        stop.set()
        t.join()
    assert not errors


@pytest.mark.parametrize("chunk", range(4))
def test_random_sequences_match_reference(chunk):
    from .sequences import run_sequence

    for seed in range(chunk * 50, chunk * 50 + 50):
        run_sequence(100_000 + seed)
