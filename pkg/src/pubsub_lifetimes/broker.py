"""Single-writer metadata broker.

The broker owns both metadata planes for every topic: the data plane (entry
records with their subscriber bitmaps) and the control plane (endpoint
tables, watermarks). All mutations go through it, guarded by a two-level
reader-writer lock hierarchy acquired global-then-topic:

============  ===========  ==========
operation     global lock  topic lock
============  ===========  ==========
publish       READ         WRITE
receive       READ         READ
release       READ         READ
membership    WRITE        --
============  ===========  ==========

Receive and release only flip bits in entry bitmaps (under a tiny per-topic
bit lock that stands in for an atomic ``test_and_set_bit``) and advance the
caller's own watermark, so all subscribers of a topic can receive at once.
"""

from __future__ import annotations

import enum
import json
import threading
from contextlib import contextmanager
from dataclasses import asdict, dataclass, field
from typing import Callable, Iterator

from .arena import ArenaRef
from .errors import (
    BitNotSet,
    IdSpaceExhausted,
    TopicGone,
    UnknownEndpoint,
    UnknownEntry,
    UnknownTopic,
)
from .rwlock import RWLock

DEFAULT_BITMAP_WIDTH = 64

READ = "READ"
WRITE = "WRITE"
NONE = "-"


class Durability(enum.IntEnum):
    VOLATILE = 0
    TRANSIENT_LOCAL = 1


@dataclass(frozen=True)
class QoS:
    durability: Durability = Durability.VOLATILE
    depth: int = 1

    def __post_init__(self) -> None:
        if self.depth < 1:
            raise ValueError("QoS depth must be >= 1 under KeepLast")
        object.__setattr__(self, "durability", Durability(self.durability))

    @classmethod
    def transient_local(cls, depth: int = 1) -> "QoS":
        return cls(Durability.TRANSIENT_LOCAL, depth)

    @classmethod
    def volatile(cls, depth: int = 1) -> "QoS":
        return cls(Durability.VOLATILE, depth)


@dataclass
class GlobalUpdateCounters:
    publish_ops: int = 0
    receive_bit_sets: int = 0
    release_bit_clears: int = 0
    membership_ops: int = 0

    @property
    def total(self) -> int:
        return self.publish_ops + self.receive_bit_sets + self.release_bit_clears + self.membership_ops

    def add(self, other: "GlobalUpdateCounters") -> None:
        self.publish_ops += other.publish_ops
        self.receive_bit_sets += other.receive_bit_sets
        self.release_bit_clears += other.release_bit_clears
        self.membership_ops += other.membership_ops

    def as_dict(self) -> dict[str, int]:
        return asdict(self)


@dataclass
class EntryRecord:
    entry_id: int
    payload_ref: ArenaRef
    publisher_local_id: int
    bitmap: int = 0


@dataclass
class PublisherRecord:
    local_id: int
    pid: int
    qos: QoS


@dataclass
class SubscriberRecord:
    local_id: int
    pid: int
    qos: QoS
    watermark: int = 0


@dataclass(frozen=True)
class PublishResult:
    entry_id: int
    subscriber_ids: list[int]
    evicted: list[ArenaRef]


@dataclass(frozen=True)
class ReceivedEntry:
    entry_id: int
    payload_ref: ArenaRef


@dataclass
class TopicState:
    name: str
    width: int
    entries: dict[int, EntryRecord] = field(default_factory=dict)
    publishers: dict[int, PublisherRecord] = field(default_factory=dict)
    subscribers: dict[int, SubscriberRecord] = field(default_factory=dict)
    next_entry_id: int = 1
    next_local_id: int = 0
    # publisher id -> entry ids still in the tree, oldest first
    pub_entries: dict[int, list[int]] = field(default_factory=dict)
    # publisher id -> (durability, depth) governing retention; outlives the
    # publisher record so the broker can keep retaining after it leaves
    retention: dict[int, tuple[Durability, int]] = field(default_factory=dict)
    counters: GlobalUpdateCounters = field(default_factory=GlobalUpdateCounters)
    lock: RWLock = field(default_factory=RWLock)
    bit_lock: threading.Lock = field(default_factory=threading.Lock)

    def allocate_id(self) -> int:
        if self.next_local_id >= self.width:
            raise IdSpaceExhausted(
                f"topic {self.name!r}: all {self.width} local ids have been used"
            )
        lid = self.next_local_id
        self.next_local_id += 1
        return lid

    def is_empty(self) -> bool:
        return not (self.entries or self.publishers or self.subscribers)

    # eviction ---------------------------------------------------------------
    def evict_publisher(self, pub_id: int) -> list[ArenaRef]:
        """Evict this publisher's zero-bitmap entries beyond its retention depth."""
        ids = self.pub_entries.get(pub_id)
        if not ids:
            return []
        depth = self.retention[pub_id][1]
        cutoff = len(ids) - depth
        if cutoff <= 0:
            return []
        evicted: list[ArenaRef] = []
        kept: list[int] = []
        for eid in ids[:cutoff]:
            entry = self.entries[eid]
            if entry.bitmap:
                kept.append(eid)
            else:
                del self.entries[eid]
                evicted.append(entry.payload_ref)
        if evicted:
            kept.extend(ids[cutoff:])
            if kept:
                self.pub_entries[pub_id] = kept
            else:
                del self.pub_entries[pub_id]
        return evicted

    def sweep(self) -> list[ArenaRef]:
        evicted: list[ArenaRef] = []
        for pub_id in sorted(self.pub_entries):
            evicted.extend(self.evict_publisher(pub_id))
        # forget retention of departed publishers with nothing left in the tree
        for pub_id in [p for p in self.retention if p not in self.publishers and p not in self.pub_entries]:
            del self.retention[pub_id]
        return evicted

    def clear_bit(self, local_id: int) -> None:
        mask = ~(1 << local_id)
        for entry in self.entries.values():
            entry.bitmap &= mask

    def history_watermark(self, depth: int) -> int:
        """Watermark delivering the newest ``depth`` entries retained for history."""
        retained: list[int] = []
        for pub_id, ids in self.pub_entries.items():
            durability, pdepth = self.retention[pub_id]
            if durability is Durability.TRANSIENT_LOCAL:
                retained.extend(ids[-pdepth:])
        retained.sort()
        k = min(depth, len(retained))
        if k == 0:
            return self.next_entry_id - 1
        return retained[-k] - 1

    def report(self) -> dict:
        return {
            "name": self.name,
            "next_entry_id": self.next_entry_id,
            "next_local_id": self.next_local_id,
            "entries": [
                {
                    "entry_id": e.entry_id,
                    "publisher": e.publisher_local_id,
                    "ref": e.payload_ref.as_list(),
                    "bitmap": e.bitmap,
                }
                for e in sorted(self.entries.values(), key=lambda e: e.entry_id)
            ],
            "publishers": [
                {"local_id": p.local_id, "pid": p.pid, "durability": int(p.qos.durability), "depth": p.qos.depth}
                for p in sorted(self.publishers.values(), key=lambda p: p.local_id)
            ],
            "subscribers": [
                {
                    "local_id": s.local_id,
                    "pid": s.pid,
                    "durability": int(s.qos.durability),
                    "depth": s.qos.depth,
                    "watermark": s.watermark,
                }
                for s in sorted(self.subscribers.values(), key=lambda s: s.local_id)
            ],
            "retention": [[p, int(d), n] for p, (d, n) in sorted(self.retention.items())],
            "counters": self.counters.as_dict(),
        }


class _DataPath:
    """Per-topic lock for one data-path operation, plus the debug generation checks."""

    __slots__ = ("broker", "op", "guard", "mode", "gen")

    def __init__(self, broker: "Broker", op: str, topic: TopicState, mode: str):
        self.broker = broker
        self.op = op
        self.mode = mode
        self.guard = topic.lock.write() if mode == WRITE else topic.lock.read()

    def __enter__(self) -> None:
        b = self.broker
        self.gen = b._generation
        if b.debug:
            assert self.gen % 2 == 0, "data path observed a half-applied membership change"
        self.guard.__enter__()
        if b.record_locks:
            b._log(self.op, READ, self.mode)

    def __exit__(self, *exc) -> None:
        self.guard.__exit__()
        if self.broker.debug:
            assert self.broker._generation == self.gen, "membership changed under a data-path operation"


def snapshot_bytes(report: dict) -> bytes:
    """Canonical serialisation of a snapshot report."""
    return json.dumps(report, sort_keys=True, separators=(",", ":")).encode()


class Broker:
    """In-process single-writer broker.

    ``reclaim`` is called with every evicted payload reference, after the
    entry has left the tree; the broker owns reclamation because payload
    segments outlive crashed publishers. ``record_locks`` keeps a log of
    ``(operation, global_mode, topic_mode)`` tuples. ``debug`` enables the
    seqlock-style membership generation checks on the data path.
    """

    def __init__(
        self,
        max_subscribers_per_topic: int = DEFAULT_BITMAP_WIDTH,
        reclaim: Callable[[ArenaRef], None] | None = None,
        record_locks: bool = False,
        debug: bool = False,
    ):
        if max_subscribers_per_topic < 1:
            raise ValueError("bitmap width must be positive")
        self.width = max_subscribers_per_topic
        self._reclaim = reclaim
        self._topics: dict[str, TopicState] = {}
        self._global = RWLock()
        self._retired = GlobalUpdateCounters()
        self.record_locks = record_locks
        self.lock_log: list[tuple[str, str, str]] = []
        self._log_lock = threading.Lock()
        self.debug = debug
        self._generation = 0
        self.receive_hook: Callable[[str, int], None] | None = None

    # locking ------------------------------------------------------------------
    def _log(self, op: str, global_mode: str, topic_mode: str) -> None:
        if self.record_locks:
            with self._log_lock:
                self.lock_log.append((op, global_mode, topic_mode))

    @contextmanager
    def _membership(self, op: str) -> Iterator[None]:
        with self._global.write():
            self._log(op, WRITE, NONE)
            self._generation += 1  # odd: change in progress
            try:
                yield
            finally:
                self._generation += 1

    def _data_path(self, op: str, topic: TopicState, mode: str) -> "_DataPath":
        # caller already holds the global read lock
        return _DataPath(self, op, topic, mode)

    def _evicted(self, refs: list[ArenaRef]) -> list[ArenaRef]:
        if self._reclaim is not None:
            for ref in refs:
                self._reclaim(ref)
        return refs

    def _topic_for_endpoint(self, topic: str) -> TopicState:
        state = self._topics.get(topic)
        if state is None:
            raise UnknownEndpoint(f"no topic {topic!r}")
        return state

    def _maybe_drop_topic(self, state: TopicState) -> None:
        if state.is_empty():
            self._retired.add(state.counters)
            del self._topics[state.name]

    # membership -----------------------------------------------------------------
    def register_publisher(self, topic: str, qos: QoS, pid: int) -> int:
        if not topic:
            raise ValueError("topic name must be nonempty")
        with self._membership("register_publisher"):
            state = self._topics.get(topic)
            created = state is None
            if created:
                state = TopicState(topic, self.width)
            lid = state.allocate_id()
            if created:
                self._topics[topic] = state
            state.publishers[lid] = PublisherRecord(lid, pid, qos)
            state.retention[lid] = (qos.durability, qos.depth)
            state.counters.membership_ops += 1
            return lid

    def register_subscriber(self, topic: str, qos: QoS, pid: int) -> tuple[int, int]:
        if not topic:
            raise ValueError("topic name must be nonempty")
        with self._membership("register_subscriber"):
            state = self._topics.get(topic)
            created = state is None
            if created:
                state = TopicState(topic, self.width)
            lid = state.allocate_id()
            if created:
                self._topics[topic] = state
            if qos.durability is Durability.TRANSIENT_LOCAL:
                watermark = state.history_watermark(qos.depth)
            else:
                watermark = state.next_entry_id - 1
            state.subscribers[lid] = SubscriberRecord(lid, pid, qos, watermark)
            state.counters.membership_ops += 1
            return lid, watermark

    def unregister_subscriber(self, topic: str, subscriber_local_id: int) -> list[ArenaRef]:
        with self._membership("unregister_subscriber"):
            state = self._topic_for_endpoint(topic)
            if subscriber_local_id not in state.subscribers:
                raise UnknownEndpoint(f"topic {topic!r}: no subscriber {subscriber_local_id}")
            del state.subscribers[subscriber_local_id]
            state.clear_bit(subscriber_local_id)
            state.counters.membership_ops += 1
            evicted = state.sweep()
            self._maybe_drop_topic(state)
            return self._evicted(evicted)

    def unregister_publisher(self, topic: str, publisher_local_id: int) -> list[ArenaRef]:
        with self._membership("unregister_publisher"):
            state = self._topic_for_endpoint(topic)
            if publisher_local_id not in state.publishers:
                raise UnknownEndpoint(f"topic {topic!r}: no publisher {publisher_local_id}")
            evicted = self._remove_publisher(state, publisher_local_id)
            self._maybe_drop_topic(state)
            return self._evicted(evicted)

    def _remove_publisher(self, state: TopicState, pub_id: int) -> list[ArenaRef]:
        record = state.publishers.pop(pub_id)
        state.counters.membership_ops += 1
        if record.qos.durability is Durability.VOLATILE:
            # nobody will ever ask for this history; keep only what is referenced
            state.retention[pub_id] = (Durability.VOLATILE, 0)
        return state.sweep()

    def handle_process_exit(self, pid: int) -> list[ArenaRef]:
        evicted: list[ArenaRef] = []
        with self._membership("process_exit"):
            for state in list(self._topics.values()):
                subs = [s for s in state.subscribers.values() if s.pid == pid]
                pubs = [p for p in state.publishers.values() if p.pid == pid]
                if not subs and not pubs:
                    continue
                for sub in subs:
                    del state.subscribers[sub.local_id]
                    state.clear_bit(sub.local_id)
                    state.counters.membership_ops += 1
                for pub in pubs:
                    evicted.extend(self._remove_publisher(state, pub.local_id))
                evicted.extend(state.sweep())
                self._maybe_drop_topic(state)
            # reclaim before anyone can observe the entries gone but the slots live
            return self._evicted(evicted)

    # data path -----------------------------------------------------------------
    def publish_entry(self, topic: str, publisher_local_id: int, payload_ref: ArenaRef) -> PublishResult:
        with self._global.read():
            state = self._topics.get(topic)
            if state is None:
                raise TopicGone(f"topic {topic!r} no longer exists")
            with self._data_path("publish", state, WRITE):
                if publisher_local_id not in state.publishers:
                    raise UnknownEndpoint(f"topic {topic!r}: no publisher {publisher_local_id}")
                eid = state.next_entry_id
                state.next_entry_id += 1
                state.entries[eid] = EntryRecord(eid, payload_ref, publisher_local_id)
                state.pub_entries.setdefault(publisher_local_id, []).append(eid)
                evicted = state.evict_publisher(publisher_local_id)
                state.counters.publish_ops += 1
                subscriber_ids = sorted(state.subscribers)
                self._evicted(evicted)
        return PublishResult(eid, subscriber_ids, evicted)

    def receive_entries(self, topic: str, subscriber_local_id: int) -> list[ReceivedEntry]:
        with self._global.read():
            state = self._topic_for_endpoint(topic)
            with self._data_path("receive", state, READ):
                sub = state.subscribers.get(subscriber_local_id)
                if sub is None:
                    raise UnknownEndpoint(f"topic {topic!r}: no subscriber {subscriber_local_id}")
                if self.receive_hook is not None:
                    self.receive_hook(topic, subscriber_local_id)
                mask = 1 << subscriber_local_id
                out: list[ReceivedEntry] = []
                # entry ids are inserted in increasing order, so dict order is id order
                ids = [eid for eid in list(state.entries) if eid > sub.watermark]
                with state.bit_lock:
                    for eid in ids:
                        entry = state.entries.get(eid)
                        if entry is None:
                            continue
                        entry.bitmap |= mask
                        out.append(ReceivedEntry(eid, entry.payload_ref))
                    state.counters.receive_bit_sets += len(out)
                if out:
                    sub.watermark = out[-1].entry_id
                return out

    def release_reference(self, topic: str, subscriber_local_id: int, entry_id: int) -> None:
        with self._global.read():
            state = self._topic_for_endpoint(topic)
            with self._data_path("release", state, READ):
                if subscriber_local_id not in state.subscribers:
                    raise UnknownEndpoint(f"topic {topic!r}: no subscriber {subscriber_local_id}")
                mask = 1 << subscriber_local_id
                with state.bit_lock:
                    entry = state.entries.get(entry_id)
                    if entry is None:
                        raise UnknownEntry(f"topic {topic!r}: entry {entry_id} is not in the tree")
                    if not entry.bitmap & mask:
                        raise BitNotSet(
                            f"topic {topic!r}: subscriber {subscriber_local_id} holds no reference to {entry_id}"
                        )
                    entry.bitmap &= ~mask
                    state.counters.release_bit_clears += 1

    # introspection -----------------------------------------------------------------
    def counters(self, topic: str | None = None) -> GlobalUpdateCounters:
        with self._global.read():
            if topic is not None:
                state = self._topics.get(topic)
                if state is None:
                    raise UnknownTopic(topic)
                return GlobalUpdateCounters(**state.counters.as_dict())
            total = GlobalUpdateCounters(**self._retired.as_dict())
            for state in self._topics.values():
                total.add(state.counters)
            return total

    def snapshot(self, topic: str | None = None) -> dict:
        """Consistent read-only report of broker state (all topics, or one)."""
        with self._global.read():
            if topic is not None:
                state = self._topics.get(topic)
                if state is None:
                    raise UnknownTopic(f"no topic {topic!r}")
                with state.lock.read():
                    return state.report()
            reports = []
            total = GlobalUpdateCounters(**self._retired.as_dict())
            for name in sorted(self._topics):
                state = self._topics[name]
                with state.lock.read():
                    reports.append(state.report())
                    total.add(state.counters)
            return {"topics": reports, "counters": total.as_dict()}

    def topics(self) -> list[str]:
        with self._global.read():
            return sorted(self._topics)
