"""Smaller runs of the acceptance stress workload, plus a negative control."""

import pytest

from pubsub_lifetimes.broker import TopicState

from .stress import run_stress


@pytest.mark.parametrize("seed", [1, 2, 3])
def test_stress_is_clean(seed):
    r = run_stress(seed, messages=4000, topics=4)
    assert r.crashes > 0 and r.received > 0
    assert (r.poisoned, r.mismatched, r.release_errors) == (0, 0, 0)
    assert r.live_slots == r.expected_live == r.snapshot_entries


def test_stress_detects_eviction_that_ignores_holders(monkeypatch):
    def evict_ignoring_bits(self, pub_id):
        ids = self.pub_entries.get(pub_id)
        cutoff = len(ids or []) - self.retention.get(pub_id, (None, 0))[1]
        if cutoff <= 0:
            return []
        self.pub_entries[pub_id] = ids[cutoff:]
        return [self.entries.pop(eid).payload_ref for eid in ids[:cutoff]]

    monkeypatch.setattr(TopicState, "evict_publisher", evict_ignoring_bits)
    r = run_stress(1, messages=2000, topics=4)
    assert r.poisoned > 0
