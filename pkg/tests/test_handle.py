import threading

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from pubsub_lifetimes import Domain, QoS, Role, access, clone_handle, drop_handle, loan, publish
from pubsub_lifetimes.errors import ArenaExhausted, InvalidHandle, PoisonedPayload


def pair(domain, pub_qos=None, sub_qos=None, topic="t"):
    p = domain.node().create_publisher(topic, pub_qos or QoS.volatile(1), message_size=64)
    s = domain.node().create_subscriber(topic, sub_qos or QoS.volatile())
    return p, s


def broker_calls(domain):
    return domain.broker.counters().total


def test_loan_initial_state(domain):
    p, _ = pair(domain)
    before = broker_calls(domain)
    h = loan(p)
    assert h.role is Role.PUBLISHER_LOAN
    assert h.local_count == 1 and h.valid and h.entry_id is None
    assert not access(h).readonly
    h2 = clone_handle(h)
    assert h.local_count == 2
    assert broker_calls(domain) == before


def test_loan_after_arena_filled_by_unreclaimed_entries():
    d = Domain(arena_capacity=4 * 64)
    p, s = pair(d, pub_qos=QoS.volatile(1))
    held = []
    for _ in range(4):  # capacity accounting: 4 slots of 64 bytes
        publish(loan(p))
        held += s.take()  # subscriber keeps every reference
    assert p.node.arena.live_slots() == 4
    with pytest.raises(ArenaExhausted):
        loan(p)
    for h in held:
        h.drop()
    # release clears bits only; the slots stay resident until an eviction point
    assert p.node.arena.live_slots() == 4
    with pytest.raises(ArenaExhausted):
        loan(p)
    s.close()  # membership change sweeps the topic
    assert p.node.arena.live_slots() == 1
    publish(loan(p))
    assert p.node.arena.live_slots() == 1


def test_clone_of_subscriber_handle_is_local(domain):
    p, s = pair(domain)
    publish(loan(p))
    (h,) = s.take()
    before = broker_calls(domain)
    copies = [h.clone() for _ in range(10)]
    assert h.local_count == 11
    assert broker_calls(domain) == before
    for c in copies:
        c.drop()
    assert h.local_count == 1
    assert broker_calls(domain) == before


def test_clone_after_publish_is_invalid(domain):
    p, _ = pair(domain)
    h = loan(p)
    early = h.clone()
    publish(h)
    with pytest.raises(InvalidHandle):
        h.clone()
    with pytest.raises(InvalidHandle):
        early.access()
    assert not early.valid


def test_drop_subscriber_handle_releases_once(domain):
    p, s = pair(domain)
    publish(loan(p))
    (h,) = s.take()
    c = h.clone()
    c.drop()
    assert domain.broker.counters().release_bit_clears == 0
    drop_handle(h)
    assert domain.broker.counters().release_bit_clears == 1
    assert domain.broker.snapshot("t")["entries"][0]["bitmap"] == 0
    h.drop()
    c.drop()  # dropping an already-dropped handle is a no-op
    assert domain.broker.counters().release_bit_clears == 1


def test_unpublished_loan_drop_frees_slot(domain):
    p, _ = pair(domain)
    before = domain.broker.snapshot("t")
    h = loan(p)
    assert p.node.arena.live_slots() == 1
    h.drop()
    assert p.node.arena.live_slots() == 0
    assert domain.broker.snapshot("t") == before
    # the slot is immediately reusable
    h2 = loan(p)
    assert h2.ref.offset == h.ref.offset


def test_publish_with_no_subscribers(domain):
    p = domain.node().create_publisher("solo", QoS.volatile(1))
    r = publish(loan(p))
    assert (r.entry_id, r.notified_subscriber_count, r.evicted_count) == (1, 0, 0)
    r = publish(loan(p))
    assert (r.entry_id, r.evicted_count) == (2, 1)


def test_publish_twice_is_invalid(domain):
    p, _ = pair(domain)
    h = loan(p)
    publish(h)
    with pytest.raises(InvalidHandle):
        publish(h)


def test_subscriber_handle_cannot_be_published(domain):
    p, s = pair(domain)
    publish(loan(p))
    (h,) = s.take()
    with pytest.raises(InvalidHandle):
        p.publish(h)


def test_access_views(domain):
    p, s = pair(domain)
    h = loan(p)
    access(h)[:3] = b"abc"
    publish(h)
    (r,) = s.take()
    view = access(r)
    assert view.readonly and bytes(view[:3]) == b"abc"
    with pytest.raises(TypeError):
        view[0] = 1


def test_forced_reclaim_is_detected_as_poison(domain):
    p, s = pair(domain)
    publish(loan(p))
    (h,) = s.take()
    domain.arenas.reclaim(h.ref)  # test-only backdoor: violate R1 on purpose
    with pytest.raises(PoisonedPayload):
        h.access()
    assert domain.arenas.get(h.ref.arena_id).poisoned_observations == 1


@pytest.mark.parametrize("k", [0, 1, 10, 100])
@pytest.mark.parametrize("n_subs", [1, 3])
def test_global_updates_independent_of_copies(k, n_subs):
    d = Domain()
    p = d.node().create_publisher("t", QoS.volatile(1))
    subs = [d.node().create_subscriber("t") for _ in range(n_subs)]
    before = d.broker.counters()
    publish(loan(p))
    for s in subs:
        (h,) = s.take()
        copies = [h.clone() for _ in range(k)]
        for c in copies + [h]:
            c.drop()
    after = d.broker.counters()
    assert after.publish_ops - before.publish_ops == 1
    assert after.receive_bit_sets - before.receive_bit_sets == n_subs
    assert after.release_bit_clears - before.release_bit_clears == n_subs


@settings(max_examples=100, deadline=None)
@given(st.lists(st.sampled_from(["clone", "drop", "publish"]), max_size=25))
def test_invalidation_totality(ops):
    d = Domain()
    p = d.node().create_publisher("t", QoS.volatile(3))
    handles = [loan(p)]
    published = False
    for op in ops:
        live = [h for h in handles if not h._dropped]
        if not live:
            break
        h = live[-1]
        if op == "clone":
            if published:
                with pytest.raises(InvalidHandle):
                    h.clone()
            else:
                handles.append(h.clone())
        elif op == "drop":
            h.drop()
        elif not published:
            publish(h)
            published = True
    if published:
        for h in handles:
            with pytest.raises(InvalidHandle):
                h.access()
        assert p.node.arena.live_slots() == 1  # owned by the broker now
    elif all(h._dropped for h in handles):
        assert p.node.arena.live_slots() == 0


def test_concurrent_clone_drop_keeps_count_exact(domain):
    p, s = pair(domain)
    publish(loan(p))
    (h,) = s.take()

    def work():
        for _ in range(2000):
            h.clone().drop()

    threads = [threading.Thread(target=work) for _ in range(4)]
    for t in threads:
        t.start()
    for t in threads:
        t.join()
    assert h.local_count == 1
    assert domain.broker.counters().release_bit_clears == 0
    h.drop()
    assert domain.broker.counters().release_bit_clears == 1


def test_crashed_subscriber_abandons_handles(domain):
    p, s = pair(domain)
    publish(loan(p))
    (h,) = s.take()
    s.node.crash()
    h.drop()  # no broker call from a dead process
    assert domain.broker.counters().release_bit_clears == 0
    publish(loan(p))
    assert [e["entry_id"] for e in domain.broker.snapshot("t")["entries"]] == [2]
