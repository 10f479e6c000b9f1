"""Post-publish subscriber wakeups.

Every subscriber owns a capacity-1 wakeup queue. A publisher sends one
zero-length wakeup per current subscriber after each publish; a send to a
queue that is already pending returns immediately (``COALESCED``) because the
subscriber is going to wake anyway and its next receive drains every entry
past its watermark.

Backends:

* :class:`EventLoop` / :class:`WakeupQueue` - in-process flag + condition.
* :class:`FifoEventLoop` / :class:`FifoNotifier` - named FIFOs multiplexed
  with ``epoll`` for the multi-process mode.

Polling mode (:func:`poll_loop_step`) skips wakeups altogether and receives on
a fixed interval.
"""

from __future__ import annotations

import enum
import errno
import fcntl
import hashlib
import os
import select
import stat
import struct
import termios
import threading
import time
from dataclasses import dataclass
from pathlib import Path
from typing import Hashable, Iterable

from .errors import QueueGone, Timeout

DEFAULT_POLL_INTERVAL = 100e-6


class Delivery(str, enum.Enum):
    DELIVERED = "delivered"
    COALESCED = "coalesced"


class Mode(str, enum.Enum):
    EVENT = "event"
    POLL = "poll"


@dataclass(frozen=True)
class DeliveryMode:
    mode: Mode = Mode.EVENT
    poll_interval: float = DEFAULT_POLL_INTERVAL

    def __post_init__(self) -> None:
        object.__setattr__(self, "mode", Mode(self.mode))
        if self.mode is Mode.POLL and self.poll_interval <= 0:
            raise ValueError("poll_interval must be positive in polling mode")


# --------------------------------------------------------------------------
# in-process backend


class WakeupQueue:
    capacity = 1

    def __init__(self, key: Hashable, loop: "EventLoop"):
        self.key = key
        self._loop = loop
        self.pending = False
        self.closed = False
        self.sends = 0

    def notify(self) -> Delivery:
        with self._loop._cond:
            if self.closed:
                raise QueueGone(f"wakeup queue {self.key!r} is closed")
            self.sends += 1
            if self.pending:
                return Delivery.COALESCED
            self.pending = True
            self._loop._cond.notify_all()
            return Delivery.DELIVERED

    def close(self) -> None:
        with self._loop._cond:
            self.closed = True
            self.pending = False
            self._loop._queues.pop(self.key, None)
            self._loop._cond.notify_all()


class EventLoop:
    """Per-process wait set over wakeup queues (the ``epoll`` analogue)."""

    def __init__(self) -> None:
        self._cond = threading.Condition(threading.Lock())
        self._queues: dict[Hashable, WakeupQueue] = {}

    def queue(self, key: Hashable) -> WakeupQueue:
        with self._cond:
            q = self._queues.get(key)
            if q is None:
                q = self._queues[key] = WakeupQueue(key, self)
            return q

    def wait_events(self, subscriber_set: Iterable[Hashable] | None = None, timeout: float | None = None) -> list:
        """Block until some queue is pending; return and clear those keys."""
        keys = None if subscriber_set is None else set(subscriber_set)
        deadline = None if timeout is None else time.monotonic() + timeout
        with self._cond:
            while True:
                ready = [
                    q for q in self._queues.values() if q.pending and (keys is None or q.key in keys)
                ]
                if ready:
                    for q in ready:
                        q.pending = False
                    return [q.key for q in ready]
                remaining = None if deadline is None else deadline - time.monotonic()
                if remaining is not None and remaining <= 0:
                    raise Timeout(f"no wakeup within {timeout}s")
                self._cond.wait(remaining)


class WakeupRegistry:
    """Publisher-side lookup of subscriber queues by ``(topic, local_id)``."""

    def __init__(self) -> None:
        self._queues: dict[tuple[str, int], WakeupQueue] = {}
        self._lock = threading.Lock()

    def register(self, topic: str, local_id: int, queue: WakeupQueue) -> None:
        with self._lock:
            self._queues[(topic, local_id)] = queue

    def unregister(self, topic: str, local_id: int) -> None:
        with self._lock:
            self._queues.pop((topic, local_id), None)

    def notify(self, topic: str, local_id: int) -> Delivery:
        q = self._queues.get((topic, local_id))
        if q is None:
            raise QueueGone(f"no wakeup queue for {topic!r}/{local_id}")
        return q.notify()


def notify_subscriber(queue: WakeupQueue) -> Delivery:
    return queue.notify()


def poll_loop_step(subscriber, interval: float = DEFAULT_POLL_INTERVAL):
    """One polling tick: sleep, then receive whatever is pending."""
    time.sleep(interval)
    return subscriber.take()


# --------------------------------------------------------------------------
# multi-process backend


def topic_hash(topic: str) -> str:
    return hashlib.sha1(topic.encode()).hexdigest()[:16]


def queue_path(prefix: str | os.PathLike, topic: str, local_id: int) -> Path:
    return Path(prefix) / topic_hash(topic) / str(local_id)


def _fionread(fd: int) -> int:
    buf = fcntl.ioctl(fd, termios.FIONREAD, b"\0\0\0\0")
    return struct.unpack("i", buf)[0]


def _reader_gone(fd: int) -> bool:
    p = select.poll()
    p.register(fd, select.POLLOUT)
    return any(ev & select.POLLERR for _, ev in p.poll(0))


class FifoEventLoop:
    """Subscriber-side wait set: one named FIFO per subscriber, read via epoll."""

    def __init__(self, prefix: str | os.PathLike):
        self.prefix = Path(prefix)
        self._epoll = select.epoll()
        self._by_fd: dict[int, tuple[Hashable, Path, int]] = {}
        self._by_key: dict[Hashable, int] = {}

    def queue(self, topic: str, local_id: int) -> Hashable:
        key = (topic, local_id)
        path = queue_path(self.prefix, topic, local_id)
        path.parent.mkdir(parents=True, exist_ok=True)
        try:
            os.mkfifo(path, 0o600)
        except FileExistsError:
            if not stat.S_ISFIFO(os.stat(path).st_mode):
                raise
        rfd = os.open(path, os.O_RDONLY | os.O_NONBLOCK)
        # keep a writer open so the read end never reports hang-up
        keep = os.open(path, os.O_WRONLY | os.O_NONBLOCK)
        self._epoll.register(rfd, select.EPOLLIN)
        self._by_fd[rfd] = (key, path, keep)
        self._by_key[key] = rfd
        return key

    def close_queue(self, key: Hashable) -> None:
        rfd = self._by_key.pop(key, None)
        if rfd is None:
            return
        _, path, keep = self._by_fd.pop(rfd)
        self._epoll.unregister(rfd)
        os.close(rfd)
        os.close(keep)
        try:
            path.unlink()
        except FileNotFoundError:
            pass

    def wait_events(self, subscriber_set: Iterable[Hashable] | None = None, timeout: float | None = None) -> list:
        keys = None if subscriber_set is None else set(subscriber_set)
        deadline = None if timeout is None else time.monotonic() + timeout
        while True:
            remaining = -1 if deadline is None else max(0.0, deadline - time.monotonic())
            events = self._epoll.poll(remaining)
            ready = []
            for fd, _ in events:
                key = self._by_fd[fd][0]
                if keys is not None and key not in keys:
                    continue
                try:
                    while os.read(fd, 4096):
                        pass
                except BlockingIOError:
                    pass
                ready.append(key)
            if ready:
                return sorted(ready)
            if deadline is not None and time.monotonic() >= deadline:
                raise Timeout(f"no wakeup within {timeout}s")

    def close(self) -> None:
        for key in list(self._by_key):
            self.close_queue(key)
        self._epoll.close()


class FifoNotifier:
    """Publisher-side sender into subscriber FIFOs; never blocks."""

    def __init__(self, prefix: str | os.PathLike):
        self.prefix = Path(prefix)
        self._fds: dict[tuple[str, int], int] = {}

    def notify(self, topic: str, local_id: int) -> Delivery:
        key = (topic, local_id)
        fd = self._fds.get(key)
        if fd is None:
            try:
                fd = os.open(queue_path(self.prefix, topic, local_id), os.O_WRONLY | os.O_NONBLOCK)
            except (FileNotFoundError, OSError) as exc:
                if isinstance(exc, FileNotFoundError) or exc.errno == errno.ENXIO:
                    raise QueueGone(f"no wakeup queue for {topic!r}/{local_id}") from None
                raise
            self._fds[key] = fd
        try:
            if _reader_gone(fd):
                raise BrokenPipeError
            if _fionread(fd) > 0:
                return Delivery.COALESCED
            os.write(fd, b"\0")
        except BlockingIOError:
            return Delivery.COALESCED
        except BrokenPipeError:
            os.close(self._fds.pop(key))
            raise QueueGone(f"subscriber {topic!r}/{local_id} has gone") from None
        return Delivery.DELIVERED

    def unregister(self, topic: str, local_id: int) -> None:
        fd = self._fds.pop((topic, local_id), None)
        if fd is not None:
            os.close(fd)

    def close(self) -> None:
        for fd in self._fds.values():
            os.close(fd)
        self._fds.clear()
