"""Application-facing message handles with two-level reference counting.

A :class:`MessageHandle` behaves like a shared pointer. Copies made with
:meth:`MessageHandle.clone` only bump the process-local count in the shared
:class:`ControlBlock`; the broker hears about a received message exactly
twice per subscriber: once when :meth:`Subscriber.take` sets its bit, and once
when the last local handle is dropped.

On the publisher side, :meth:`Publisher.publish` hands the message to the
middleware and flips the control block's validity flag, which invalidates
every copy at once. A loan that is dropped without being published is
returned straight to the arena.
"""

from __future__ import annotations

import enum
import itertools
import threading
from dataclasses import dataclass
from typing import TYPE_CHECKING, Protocol

from .arena import Arena, ArenaRef, ArenaRegistry, InProcArena
from .broker import Broker, QoS
from .errors import InvalidHandle, QueueGone, TopicGone, UnknownEndpoint
from .notify import Delivery, EventLoop, WakeupRegistry

if TYPE_CHECKING:
    from .broker import PublishResult, ReceivedEntry


class Role(enum.Enum):
    PUBLISHER_LOAN = "publisher_loan"
    SUBSCRIBER_REF = "subscriber_ref"


class BrokerAPI(Protocol):
    def register_publisher(self, topic: str, qos: QoS, pid: int) -> int: ...
    def register_subscriber(self, topic: str, qos: QoS, pid: int) -> tuple[int, int]: ...
    def unregister_publisher(self, topic: str, publisher_local_id: int) -> list[ArenaRef]: ...
    def unregister_subscriber(self, topic: str, subscriber_local_id: int) -> list[ArenaRef]: ...
    def publish_entry(self, topic: str, publisher_local_id: int, payload_ref: ArenaRef) -> "PublishResult": ...
    def receive_entries(self, topic: str, subscriber_local_id: int) -> list["ReceivedEntry"]: ...
    def release_reference(self, topic: str, subscriber_local_id: int, entry_id: int) -> None: ...
    def handle_process_exit(self, pid: int) -> list[ArenaRef]: ...


class ControlBlock:
    """State shared by every copy of one message within one process."""

    __slots__ = ("local_count", "valid", "published", "released", "_lock")

    def __init__(self) -> None:
        self.local_count = 1
        self.valid = True
        self.published = False
        self.released = False
        self._lock = threading.Lock()


@dataclass(frozen=True)
class PublishReceipt:
    entry_id: int
    notified_subscriber_count: int
    evicted_count: int


class MessageHandle:
    """One reference to a message; see the module docstring for semantics."""

    __slots__ = ("topic", "role", "control", "ref", "entry_id", "_owner", "_dropped")

    def __init__(self, topic: str, role: Role, control: ControlBlock, ref: ArenaRef, owner, entry_id: int | None = None):
        self.topic = topic
        self.role = role
        self.control = control
        self.ref = ref
        self.entry_id = entry_id
        self._owner = owner
        self._dropped = False

    def __repr__(self) -> str:
        state = "dropped" if self._dropped else ("valid" if self.control.valid else "invalid")
        return f"<MessageHandle {self.role.value} {self.topic!r} entry={self.entry_id} {state}>"

    @property
    def valid(self) -> bool:
        return self.control.valid and not self._dropped

    @property
    def local_count(self) -> int:
        return self.control.local_count

    def clone(self) -> "MessageHandle":
        if self._dropped:
            raise InvalidHandle("handle was dropped")
        cb = self.control
        with cb._lock:
            if not cb.valid:
                raise InvalidHandle("handle was invalidated by publish")
            cb.local_count += 1
        return MessageHandle(self.topic, self.role, cb, self.ref, self._owner, self.entry_id)

    def drop(self) -> None:
        if self._dropped:
            return
        self._dropped = True
        cb = self.control
        with cb._lock:
            cb.local_count -= 1
            last = cb.local_count == 0
        if last:
            self._owner._last_reference_dropped(self)

    def access(self) -> memoryview:
        """Payload view: writable for a loan, read-only for a received message."""
        if self._dropped:
            raise InvalidHandle("handle was dropped")
        if not self.control.valid:
            raise InvalidHandle("handle was invalidated by publish")
        return self._owner._view(self.ref)

    @property
    def payload(self) -> memoryview:
        return self.access()

    def __enter__(self) -> "MessageHandle":
        return self

    def __exit__(self, *exc) -> None:
        self.drop()


# module-level spellings of the handle operations
def clone_handle(h: MessageHandle) -> MessageHandle:
    return h.clone()


def drop_handle(h: MessageHandle) -> None:
    h.drop()


def access(h: MessageHandle) -> memoryview:
    return h.access()


def loan(publisher: "Publisher", size: int | None = None) -> MessageHandle:
    return publisher.loan(size)


def publish(h: MessageHandle) -> PublishReceipt:
    return h._owner.publish(h)


class Publisher:
    def __init__(self, node: "Node", topic: str, qos: QoS, local_id: int, message_size: int):
        self.node = node
        self.topic = topic
        self.qos = qos
        self.local_id = local_id
        self.message_size = message_size
        self.closed = False
        self.notify_calls = 0
        self.coalesced = 0

    def loan(self, size: int | None = None) -> MessageHandle:
        """Allocate a writable message in this process's arena; no broker call."""
        if self.closed:
            raise UnknownEndpoint(f"publisher {self.topic!r}/{self.local_id} is closed")
        ref, _ = self.node.arena.allocate(size or self.message_size)
        return MessageHandle(self.topic, Role.PUBLISHER_LOAN, ControlBlock(), ref, self)

    def publish(self, h: MessageHandle) -> PublishReceipt:
        if h.role is not Role.PUBLISHER_LOAN or h._owner is not self:
            raise InvalidHandle("only a loan from this publisher can be published")
        if h._dropped:
            raise InvalidHandle("handle was dropped")
        cb = h.control
        with cb._lock:
            if cb.published or not cb.valid:
                raise InvalidHandle("message was already published")
            cb.published = True
            cb.valid = False
        try:
            result = self.node.broker.publish_entry(self.topic, self.local_id, h.ref)
        except (TopicGone, UnknownEndpoint):
            with cb._lock:
                cb.published = False
                cb.valid = True
            raise
        notify = self.node.notifier.notify
        for sid in result.subscriber_ids:
            self.notify_calls += 1
            try:
                if notify(self.topic, sid) is Delivery.COALESCED:
                    self.coalesced += 1
            except QueueGone:
                pass  # subscriber exited; the broker cleans up its membership
        h.entry_id = result.entry_id
        return PublishReceipt(result.entry_id, len(result.subscriber_ids), len(result.evicted))

    def _view(self, ref: ArenaRef) -> memoryview:
        return self.node.arena.writable(ref)

    def _last_reference_dropped(self, h: MessageHandle) -> None:
        if not h.control.published and not self.node.crashed:
            self.node.arena.reclaim(h.ref)

    def close(self) -> list[ArenaRef]:
        if self.closed:
            return []
        self.closed = True
        self.node._publishers.remove(self)
        return self.node.broker.unregister_publisher(self.topic, self.local_id)


class Subscriber:
    def __init__(self, node: "Node", topic: str, qos: QoS, local_id: int, watermark: int, queue):
        self.node = node
        self.topic = topic
        self.qos = qos
        self.local_id = local_id
        self.initial_watermark = watermark
        self.queue = queue
        self.closed = False

    @property
    def key(self) -> tuple[str, int]:
        return (self.topic, self.local_id)

    def take(self) -> list[MessageHandle]:
        """Receive every entry past the watermark as fresh handles (count 1 each)."""
        entries = self.node.broker.receive_entries(self.topic, self.local_id)
        return [
            MessageHandle(self.topic, Role.SUBSCRIBER_REF, ControlBlock(), e.payload_ref, self, e.entry_id)
            for e in entries
        ]

    def _view(self, ref: ArenaRef) -> memoryview:
        return self.node.resolver.resolve(ref)

    def _last_reference_dropped(self, h: MessageHandle) -> None:
        cb = h.control
        with cb._lock:
            if cb.released:
                return
            cb.released = True
        if self.closed or self.node.crashed:
            return  # bits were cleared by leave / exit cleanup
        self.node.broker.release_reference(self.topic, self.local_id, h.entry_id)

    def close(self) -> list[ArenaRef]:
        if self.closed:
            return []
        self.closed = True
        self.node._subscribers.remove(self)
        self.node._close_queue(self)
        return self.node.broker.unregister_subscriber(self.topic, self.local_id)


class Node:
    """One participating process: a pid, a broker connection and an arena."""

    def __init__(self, broker: BrokerAPI, pid: int, arena: Arena, resolver: ArenaRegistry, notifier, loop):
        self.broker = broker
        self.pid = pid
        self.arena = arena
        self.resolver = resolver
        self.notifier = notifier
        self.loop = loop
        self.crashed = False
        self._publishers: list[Publisher] = []
        self._subscribers: list[Subscriber] = []

    def create_publisher(self, topic: str, qos: QoS | None = None, message_size: int = 1024) -> Publisher:
        qos = qos or QoS()
        lid = self.broker.register_publisher(topic, qos, self.pid)
        pub = Publisher(self, topic, qos, lid, message_size)
        self._publishers.append(pub)
        return pub

    def create_subscriber(self, topic: str, qos: QoS | None = None) -> Subscriber:
        qos = qos or QoS()
        lid, watermark = self.broker.register_subscriber(topic, qos, self.pid)
        queue = self._open_queue(topic, lid)
        sub = Subscriber(self, topic, qos, lid, watermark, queue)
        self._subscribers.append(sub)
        return sub

    # wakeup plumbing; overridden by the multi-process client
    def _open_queue(self, topic: str, lid: int):
        q = self.loop.queue((topic, lid))
        self.notifier.register(topic, lid, q)
        return q

    def _close_queue(self, sub: Subscriber) -> None:
        self.notifier.unregister(sub.topic, sub.local_id)
        sub.queue.close()

    def wait(self, subscribers=None, timeout: float | None = None) -> list[tuple[str, int]]:
        keys = None if subscribers is None else [s.key for s in subscribers]
        return self.loop.wait_events(keys, timeout)

    @property
    def publishers(self) -> list[Publisher]:
        return list(self._publishers)

    @property
    def subscribers(self) -> list[Subscriber]:
        return list(self._subscribers)

    def close(self) -> None:
        """Graceful exit: leave every topic."""
        for sub in list(self._subscribers):
            sub.close()
        for pub in list(self._publishers):
            pub.close()

    def crash(self) -> list[ArenaRef]:
        """Simulate abrupt death: handles are abandoned, the broker cleans up."""
        self.crashed = True
        for sub in self._subscribers:
            sub.closed = True
            self._close_queue(sub)
        for pub in self._publishers:
            pub.closed = True
        self._subscribers.clear()
        self._publishers.clear()
        return self.broker.handle_process_exit(self.pid)


class Domain:
    """Single-process host: broker, arenas and wakeup queues for many nodes."""

    def __init__(
        self,
        max_subscribers_per_topic: int = 64,
        arena_capacity: int = 64 * 1024,
        poison: bool = True,
        record_locks: bool = False,
        debug: bool = False,
    ):
        self.arenas = ArenaRegistry()
        self.broker = Broker(
            max_subscribers_per_topic,
            reclaim=self.arenas.reclaim,
            record_locks=record_locks,
            debug=debug,
        )
        self.wakeups = WakeupRegistry()
        self.arena_capacity = arena_capacity
        self.poison = poison
        self._pids = itertools.count(1000)
        self.nodes: dict[int, Node] = {}

    def node(self, pid: int | None = None, arena_capacity: int | None = None) -> Node:
        pid = next(self._pids) if pid is None else pid
        arena = self.arenas.add(InProcArena(pid, arena_capacity or self.arena_capacity, self.poison))
        n = Node(self.broker, pid, arena, self.arenas, self.wakeups, EventLoop())
        self.nodes[pid] = n
        return n


__all__ = [
    "ControlBlock",
    "Delivery",
    "Domain",
    "MessageHandle",
    "Node",
    "PublishReceipt",
    "Publisher",
    "Role",
    "Subscriber",
    "access",
    "clone_handle",
    "drop_handle",
    "loan",
    "publish",
]
