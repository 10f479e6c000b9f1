"""Broker daemon: the single-writer broker behind a Unix stream socket.

Each client process holds exactly one connection. The first request on it
must be ``HELLO``, which records the client's pid and creates the client's
payload segment. When the connection goes away, for whatever reason, the
broker runs exit cleanup for that pid once.
"""

from __future__ import annotations

import argparse
import itertools
import json
import logging
import os
import shutil
import signal
import socket
import socketserver
import threading
from pathlib import Path

from ..arena import ArenaRegistry, ShmArena
from ..broker import Broker, snapshot_bytes
from ..errors import MalformedFrame, PubSubError, UnknownRef
from .frames import (
    PROTOCOL_VERSION,
    Op,
    Request,
    Response,
    UnknownOpcode,
    decode_request,
    encode_response,
    error_response,
    read_frame,
    response,
)
from .errors import ErrorCode, code_for

log = logging.getLogger(__name__)

DEFAULT_SOCKET = "/tmp/pubsub-lifetimes.sock"
SOCKET_ENV = "PUBSUB_BROKER_SOCK"


def socket_path(path: str | os.PathLike | None = None) -> Path:
    return Path(path or os.environ.get(SOCKET_ENV) or DEFAULT_SOCKET)


def wakeup_dir(sock: str | os.PathLike) -> Path:
    """Directory holding the subscribers' wakeup FIFOs for one broker."""
    return Path(f"{sock}.wake")


class _Connection(socketserver.StreamRequestHandler):
    server: "_UnixServer"

    def setup(self) -> None:
        super().setup()
        self.pid: int | None = None
        self.arena: ShmArena | None = None
        with self.server.owner._lock:
            self.server.owner._conns.add(self.request)

    def handle(self) -> None:
        owner = self.server.owner
        while True:
            try:
                frame = read_frame(self.rfile)
            except (MalformedFrame, OSError):
                return  # framing lost; treat as a dead peer
            if frame is None:
                return
            resp = self._dispatch(owner, frame)
            try:
                self.wfile.write(encode_response(resp))
                self.wfile.flush()
            except OSError:
                return

    def _dispatch(self, owner: "BrokerServer", frame: bytes) -> Response:
        try:
            req = decode_request(frame)
        except UnknownOpcode as exc:
            return error_response(exc.request_id, exc.opcode, ErrorCode.UNKNOWN_OPCODE, str(exc))
        except MalformedFrame as exc:
            # header is intact (the length matched), so the id can still be echoed
            rid, op = int.from_bytes(frame[4:12], "little"), frame[12]
            return error_response(rid, op, ErrorCode.MALFORMED, str(exc))
        try:
            return self._call(owner, req)
        except PubSubError as exc:
            return error_response(req.request_id, req.opcode, code_for(exc), str(exc))
        except ValueError as exc:
            return error_response(req.request_id, req.opcode, ErrorCode.MALFORMED, str(exc))

    def _call(self, owner: "BrokerServer", req: Request) -> Response:
        rid, op, body = req.request_id, req.opcode, req.body
        broker = owner.broker
        if op is Op.HELLO:
            version, pid = body
            if version != PROTOCOL_VERSION:
                return error_response(rid, op, ErrorCode.VERSION, f"protocol version {version} unsupported")
            if self.pid is not None:
                return error_response(rid, op, ErrorCode.PROTOCOL, "hello already received")
            self.pid = pid
            self.arena = owner.open_arena()
            return response(rid, op, PROTOCOL_VERSION, self.arena.arena_id, owner.shm_prefix)
        if self.pid is None:
            return error_response(rid, op, ErrorCode.PROTOCOL, "hello required first")
        if op is Op.REGISTER_PUB:
            return response(rid, op, broker.register_publisher(body[0], body[1], self.pid))
        if op is Op.REGISTER_SUB:
            return response(rid, op, *broker.register_subscriber(body[0], body[1], self.pid))
        if op is Op.UNREGISTER_PUB:
            return response(rid, op, broker.unregister_publisher(*body))
        if op is Op.UNREGISTER_SUB:
            return response(rid, op, broker.unregister_subscriber(*body))
        if op is Op.PUBLISH:
            r = broker.publish_entry(*body)
            return response(rid, op, r.entry_id, r.subscriber_ids, r.evicted)
        if op is Op.RECEIVE:
            got = broker.receive_entries(*body)
            return response(rid, op, [(e.entry_id, e.payload_ref) for e in got])
        if op is Op.RELEASE:
            broker.release_reference(*body)
            return response(rid, op)
        if op is Op.SNAPSHOT:
            return response(rid, op, snapshot_bytes(broker.snapshot(body[0])))
        raise AssertionError(op)  # pragma: no cover

    def finish(self) -> None:
        try:
            super().finish()
        except OSError:
            pass
        owner = self.server.owner
        if self.pid is not None:
            owner.client_gone(self.pid, self.arena)
        with owner._lock:
            owner._conns.discard(self.request)


class _UnixServer(socketserver.ThreadingUnixStreamServer):
    daemon_threads = False
    block_on_close = True  # server_close joins the connection threads
    allow_reuse_address = True
    owner: "BrokerServer"


class BrokerServer:
    """Owns the broker, the payload segments and the listening socket."""

    def __init__(
        self,
        path: str | os.PathLike | None = None,
        shm_prefix: str | None = None,
        arena_capacity: int = 64 * 1024,
        slot_size: int = 1024,
        max_subscribers_per_topic: int = 64,
    ):
        self.path = socket_path(path)
        self.shm_prefix = shm_prefix or f"psl{os.getpid()}"
        self.arena_capacity = arena_capacity
        self.slot_size = slot_size
        self.arenas = ArenaRegistry()
        self.broker = Broker(max_subscribers_per_topic, reclaim=self._reclaim)
        self.exits: dict[int, int] = {}  # pid -> number of cleanups run
        self._arena_ids = itertools.count(1)
        self._orphans: set[int] = set()
        self._lock = threading.Lock()
        self._thread: threading.Thread | None = None
        self._conns: set = set()
        if self.path.exists():
            self.path.unlink()
        self.wakeups = wakeup_dir(self.path)
        self.wakeups.mkdir(parents=True, exist_ok=True)
        self._server = _UnixServer(str(self.path), _Connection)
        self._server.owner = self

    # segments --------------------------------------------------------------------
    def open_arena(self) -> ShmArena:
        with self._lock:
            arena_id = next(self._arena_ids)
        arena = ShmArena(arena_id, self.shm_prefix, self.arena_capacity, self.slot_size, create=True)
        self.arenas.add(arena)
        return arena

    def _reclaim(self, ref) -> None:
        self.arenas.reclaim(ref)
        if ref.arena_id in self._orphans:
            self._release_if_empty(ref.arena_id)

    def _release_if_empty(self, arena_id: int) -> None:
        with self._lock:
            try:
                arena = self.arenas.get(arena_id)
            except UnknownRef:
                return
            if arena.live_slots():
                return
            self._orphans.discard(arena_id)
            del self.arenas._arenas[arena_id]
        arena.close()
        arena.unlink()

    def client_gone(self, pid: int, arena: ShmArena | None) -> None:
        self.broker.handle_process_exit(pid)
        if arena is not None:
            self._free_abandoned_loans(arena)
            # an orphaned segment stays mapped while retained history lives in it
            self._orphans.add(arena.arena_id)
            self._release_if_empty(arena.arena_id)
        with self._lock:
            self.exits[pid] = self.exits.get(pid, 0) + 1

    def _free_abandoned_loans(self, arena: ShmArena) -> None:
        # slots of a dead client that no entry refers to were loans it never published
        held = {
            (ref[1], ref[3])
            for topic in self.broker.snapshot()["topics"]
            for ref in (e["ref"] for e in topic["entries"])
            if ref[0] == arena.arena_id
        }
        for ref in arena.live_refs():
            if (ref.offset, ref.generation) not in held:
                arena.reclaim(ref)

    # lifecycle -------------------------------------------------------------------
    def serve_forever(self) -> None:
        self._server.serve_forever(poll_interval=0.05)

    def start(self) -> "BrokerServer":
        self._thread = threading.Thread(target=self.serve_forever, name="pubsub-broker", daemon=True)
        self._thread.start()
        return self

    def close(self) -> None:
        if self._thread is not None:
            self._server.shutdown()
            self._thread.join()
        with self._lock:
            conns = list(self._conns)
        for sock in conns:
            try:
                sock.shutdown(socket.SHUT_RDWR)
            except OSError:
                pass
        self._server.server_close()
        for arena in list(self.arenas):
            arena.close()
            try:
                arena.unlink()
            except FileNotFoundError:
                pass
        self.arenas._arenas.clear()
        try:
            self.path.unlink()
        except FileNotFoundError:
            pass
        shutil.rmtree(self.wakeups, ignore_errors=True)

    def __enter__(self) -> "BrokerServer":
        return self.start()

    def __exit__(self, *exc) -> None:
        self.close()


def main(argv: list[str] | None = None) -> int:
    ap = argparse.ArgumentParser(prog="pubsub-broker", description="Run the metadata broker daemon.")
    ap.add_argument("--socket", help=f"socket path (default ${SOCKET_ENV} or {DEFAULT_SOCKET})")
    ap.add_argument("--shm-prefix", help="name prefix for payload segments")
    ap.add_argument("--arena-capacity", type=int, default=64 * 1024)
    ap.add_argument("--slot-size", type=int, default=1024)
    ap.add_argument("--max-subscribers", type=int, default=64)
    ap.add_argument("--dump-snapshot", action="store_true", help="print the final snapshot on shutdown")
    ap.add_argument("-v", "--verbose", action="store_true")
    args = ap.parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO, format="%(message)s")

    server = BrokerServer(args.socket, args.shm_prefix, args.arena_capacity, args.slot_size, args.max_subscribers)
    signal.signal(signal.SIGTERM, lambda *_: threading.Thread(target=server._server.shutdown).start())
    log.info("broker listening on %s", server.path)
    try:
        server.serve_forever()
    except KeyboardInterrupt:
        pass
    finally:
        if args.dump_snapshot:
            print(json.dumps(server.broker.snapshot(), indent=2, sort_keys=True))
        server.close()
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
