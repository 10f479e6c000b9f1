"""Client side of the broker socket.

:class:`RemoteBroker` exposes the same operations as the in-process
:class:`~pubsub_lifetimes.broker.Broker`, so handles and nodes work unchanged
on top of it. :func:`connect` builds a complete multi-process :class:`Node`:
broker connection, the process's own payload segment, lazy attachment to
other processes' segments, and FIFO wakeups.
"""

from __future__ import annotations

import itertools
import json
import os
import socket
import threading

from ..arena import ArenaRef, ShmArena, ShmRegistry
from ..broker import PublishResult, QoS, ReceivedEntry
from ..errors import MalformedFrame, RemoteError
from ..handle import Node, Subscriber
from ..notify import FifoEventLoop, FifoNotifier
from .errors import exception_for
from .frames import (
    PROTOCOL_VERSION,
    Op,
    Status,
    decode_response,
    encode_request,
    read_frame,
    request,
)
from .server import socket_path, wakeup_dir


class RemoteBroker:
    """Broker proxy over one socket connection (one per client process)."""

    def __init__(self, path: str | os.PathLike | None = None, pid: int | None = None):
        self.path = socket_path(path)
        self.pid = os.getpid() if pid is None else pid
        self._sock = socket.socket(socket.AF_UNIX, socket.SOCK_STREAM)
        self._sock.connect(str(self.path))
        self._rfile = self._sock.makefile("rb")
        self._ids = itertools.count(1)
        self._lock = threading.Lock()
        self.closed = False
        version, self.arena_id, self.shm_prefix = self.call(Op.HELLO, PROTOCOL_VERSION, self.pid)
        self.version = version

    def call(self, op: Op, *body) -> tuple:
        with self._lock:
            if self.closed:
                raise ConnectionError("broker connection is closed")
            rid = next(self._ids)
            self._sock.sendall(encode_request(request(rid, op, *body)))
            frame = read_frame(self._rfile)
        if frame is None:
            raise ConnectionError("broker closed the connection")
        resp = decode_response(frame)
        if resp.request_id != rid:
            raise MalformedFrame(f"response id {resp.request_id} does not match request {rid}")
        if resp.status is Status.ERROR:
            code, message = resp.body
            raise exception_for(code, message)
        return resp.body

    def call_raw(self, frame: bytes) -> bytes:
        """Send pre-encoded bytes and return the raw response frame (testing aid)."""
        with self._lock:
            self._sock.sendall(frame)
            out = read_frame(self._rfile)
        if out is None:
            raise ConnectionError("broker closed the connection")
        return out

    # broker API ------------------------------------------------------------------
    def register_publisher(self, topic: str, qos: QoS, pid: int | None = None) -> int:
        return self.call(Op.REGISTER_PUB, topic, qos)[0]

    def register_subscriber(self, topic: str, qos: QoS, pid: int | None = None) -> tuple[int, int]:
        lid, watermark = self.call(Op.REGISTER_SUB, topic, qos)
        return lid, watermark

    def unregister_publisher(self, topic: str, publisher_local_id: int) -> list[ArenaRef]:
        return list(self.call(Op.UNREGISTER_PUB, topic, publisher_local_id)[0])

    def unregister_subscriber(self, topic: str, subscriber_local_id: int) -> list[ArenaRef]:
        return list(self.call(Op.UNREGISTER_SUB, topic, subscriber_local_id)[0])

    def publish_entry(self, topic: str, publisher_local_id: int, payload_ref: ArenaRef) -> PublishResult:
        eid, subs, evicted = self.call(Op.PUBLISH, topic, publisher_local_id, payload_ref)
        return PublishResult(eid, list(subs), list(evicted))

    def receive_entries(self, topic: str, subscriber_local_id: int) -> list[ReceivedEntry]:
        (entries,) = self.call(Op.RECEIVE, topic, subscriber_local_id)
        return [ReceivedEntry(eid, ref) for eid, ref in entries]

    def release_reference(self, topic: str, subscriber_local_id: int, entry_id: int) -> None:
        self.call(Op.RELEASE, topic, subscriber_local_id, entry_id)

    def snapshot_bytes(self, topic: str | None = None) -> bytes:
        return self.call(Op.SNAPSHOT, topic)[0]

    def snapshot(self, topic: str | None = None) -> dict:
        return json.loads(self.snapshot_bytes(topic))

    def handle_process_exit(self, pid: int) -> list[ArenaRef]:
        """Exit cleanup is triggered by losing the connection, so just drop it."""
        if pid != self.pid:
            raise RemoteError("a client can only end its own process")
        self.close()
        return []

    def close(self) -> None:
        with self._lock:
            if self.closed:
                return
            self.closed = True
            self._rfile.close()
            try:
                self._sock.shutdown(socket.SHUT_RDWR)
            except OSError:
                pass
            self._sock.close()


class RemoteNode(Node):
    """Node whose subscriber wakeups travel over named FIFOs."""

    def _open_queue(self, topic: str, lid: int):
        return self.loop.queue(topic, lid)

    def _close_queue(self, sub: Subscriber) -> None:
        self.loop.close_queue(sub.queue)

    def close(self) -> None:
        super().close()
        self.shutdown()

    def crash(self) -> list[ArenaRef]:
        out = super().crash()
        self.shutdown()
        return out

    def shutdown(self) -> None:
        self.broker.close()
        self.notifier.close()
        self.loop.close()
        self.arena.close()
        self.resolver.close()


def connect(path: str | os.PathLike | None = None, pid: int | None = None) -> RemoteNode:
    broker = RemoteBroker(path, pid)
    arena = ShmArena(broker.arena_id, broker.shm_prefix)
    resolver = ShmRegistry(broker.shm_prefix)
    resolver.add(arena)
    wake = wakeup_dir(broker.path)
    return RemoteNode(broker, broker.pid, arena, resolver, FifoNotifier(wake), FifoEventLoop(wake))
