"""Binary framing for the client/broker socket.

Every frame is ``u32 length | u64 request_id | u8 opcode | body`` where
``length`` counts the bytes after itself. Response frames carry a status
byte right after the opcode; a non-zero status is followed by an error code
and a message instead of the opcode's result body. All integers are
little-endian and fixed width.

Field encodings:

=========  =====================================================
topic      u16 byte length + UTF-8 (at most 255 bytes)
qos        u8 durability, u32 depth
ref        four u64: arena_id, offset, length, generation
list       u32 count followed by the elements
bytes      u32 length + raw bytes
=========  =====================================================
"""

from __future__ import annotations

import enum
import struct
from dataclasses import dataclass
from typing import Any, BinaryIO

from ..arena import ArenaRef
from ..broker import QoS
from ..errors import MalformedFrame

PROTOCOL_VERSION = 1
MAX_TOPIC_BYTES = 255
MAX_FRAME = 64 * 1024 * 1024

_LEN = struct.Struct("<I")
_HEAD = struct.Struct("<QB")
_U8 = struct.Struct("<B")
_U16 = struct.Struct("<H")
_U32 = struct.Struct("<I")
_U64 = struct.Struct("<Q")
_QOS = struct.Struct("<BI")
_REF = struct.Struct("<QQQQ")


class Op(enum.IntEnum):
    HELLO = 0
    REGISTER_PUB = 1
    REGISTER_SUB = 2
    UNREGISTER_PUB = 3
    UNREGISTER_SUB = 4
    PUBLISH = 5
    RECEIVE = 6
    RELEASE = 7
    SNAPSHOT = 8


class Status(enum.IntEnum):
    OK = 0
    ERROR = 1


# field kinds
TOPIC, OPT_TOPIC, QOS, U8, U32, U64, REF, U64_LIST, REF_LIST, ENTRY_LIST, BLOB, TEXT = range(12)

REQUEST_FIELDS: dict[Op, tuple[int, ...]] = {
    Op.HELLO: (U8, U64),  # version, pid
    Op.REGISTER_PUB: (TOPIC, QOS),
    Op.REGISTER_SUB: (TOPIC, QOS),
    Op.UNREGISTER_PUB: (TOPIC, U64),
    Op.UNREGISTER_SUB: (TOPIC, U64),
    Op.PUBLISH: (TOPIC, U64, REF),
    Op.RECEIVE: (TOPIC, U64),
    Op.RELEASE: (TOPIC, U64, U64),
    Op.SNAPSHOT: (OPT_TOPIC,),
}

RESPONSE_FIELDS: dict[Op, tuple[int, ...]] = {
    Op.HELLO: (U8, U32, TEXT),  # version, arena_id, segment prefix
    Op.REGISTER_PUB: (U64,),
    Op.REGISTER_SUB: (U64, U64),  # local id, watermark
    Op.UNREGISTER_PUB: (REF_LIST,),
    Op.UNREGISTER_SUB: (REF_LIST,),
    Op.PUBLISH: (U64, U64_LIST, REF_LIST),
    Op.RECEIVE: (ENTRY_LIST,),
    Op.RELEASE: (),
    Op.SNAPSHOT: (BLOB,),  # canonical JSON
}

ERROR_FIELDS = (U8, TEXT)


@dataclass(frozen=True)
class Request:
    request_id: int
    opcode: Op
    body: tuple = ()


@dataclass(frozen=True)
class Response:
    request_id: int
    opcode: int
    status: Status = Status.OK
    body: tuple = ()


class UnknownOpcode(MalformedFrame):
    """Header parsed but the opcode is not recognised; the id allows a reply."""

    def __init__(self, request_id: int, opcode: int):
        super().__init__(f"unknown opcode {opcode}")
        self.request_id = request_id
        self.opcode = opcode


# --------------------------------------------------------------------------
# field codecs


def _put_topic(out: bytearray, topic: str) -> None:
    raw = topic.encode("utf-8")
    if len(raw) > MAX_TOPIC_BYTES:
        raise MalformedFrame(f"topic is {len(raw)} bytes, limit {MAX_TOPIC_BYTES}")
    out += _U16.pack(len(raw))
    out += raw


def _put_text(out: bytearray, text: str) -> None:
    raw = text.encode("utf-8")[:0xFFFF]
    out += _U16.pack(len(raw))
    out += raw


def _put(out: bytearray, kind: int, value: Any) -> None:
    try:
        if kind == TOPIC:
            _put_topic(out, value)
        elif kind == OPT_TOPIC:
            out += _U8.pack(value is not None)
            if value is not None:
                _put_topic(out, value)
        elif kind == QOS:
            out += _QOS.pack(int(value.durability), value.depth)
        elif kind == U8:
            out += _U8.pack(value)
        elif kind == U32:
            out += _U32.pack(value)
        elif kind == U64:
            out += _U64.pack(value)
        elif kind == REF:
            out += _REF.pack(value.arena_id, value.offset, value.length, value.generation)
        elif kind == U64_LIST:
            out += _U32.pack(len(value))
            for v in value:
                out += _U64.pack(v)
        elif kind == REF_LIST:
            out += _U32.pack(len(value))
            for r in value:
                out += _REF.pack(r.arena_id, r.offset, r.length, r.generation)
        elif kind == ENTRY_LIST:
            out += _U32.pack(len(value))
            for eid, r in value:
                out += _U64.pack(eid)
                out += _REF.pack(r.arena_id, r.offset, r.length, r.generation)
        elif kind == BLOB:
            out += _U32.pack(len(value))
            out += value
        elif kind == TEXT:
            _put_text(out, value)
        else:  # pragma: no cover
            raise AssertionError(kind)
    except struct.error as exc:
        raise MalformedFrame(f"field out of range: {exc}") from None


class _Reader:
    def __init__(self, data: bytes | memoryview, pos: int = 0):
        self.data = memoryview(data)
        self.pos = pos

    def take(self, n: int) -> memoryview:
        end = self.pos + n
        if end > len(self.data):
            raise MalformedFrame("truncated body")
        chunk = self.data[self.pos : end]
        self.pos = end
        return chunk

    def unpack(self, st: struct.Struct) -> tuple:
        return st.unpack(self.take(st.size))

    def text(self, limit: int | None = None) -> str:
        (n,) = self.unpack(_U16)
        if limit is not None and n > limit:
            raise MalformedFrame(f"topic is {n} bytes, limit {limit}")
        try:
            return str(self.take(n), "utf-8")
        except UnicodeDecodeError:
            raise MalformedFrame("topic is not valid UTF-8") from None

    def count(self, item_size: int) -> int:
        (n,) = self.unpack(_U32)
        if n * item_size > len(self.data) - self.pos:
            raise MalformedFrame("list count exceeds frame")
        return n


def _get(r: _Reader, kind: int) -> Any:
    if kind == TOPIC:
        return r.text(MAX_TOPIC_BYTES)
    if kind == OPT_TOPIC:
        (flag,) = r.unpack(_U8)
        if flag > 1:
            raise MalformedFrame("bad optional flag")
        return r.text(MAX_TOPIC_BYTES) if flag else None
    if kind == QOS:
        durability, depth = r.unpack(_QOS)
        try:
            return QoS(durability, depth)
        except ValueError as exc:
            raise MalformedFrame(f"bad qos: {exc}") from None
    if kind == U8:
        return r.unpack(_U8)[0]
    if kind == U32:
        return r.unpack(_U32)[0]
    if kind == U64:
        return r.unpack(_U64)[0]
    if kind == REF:
        return ArenaRef(*r.unpack(_REF))
    if kind == U64_LIST:
        return tuple(r.unpack(_U64)[0] for _ in range(r.count(_U64.size)))
    if kind == REF_LIST:
        return tuple(ArenaRef(*r.unpack(_REF)) for _ in range(r.count(_REF.size)))
    if kind == ENTRY_LIST:
        n = r.count(_U64.size + _REF.size)
        return tuple((r.unpack(_U64)[0], ArenaRef(*r.unpack(_REF))) for _ in range(n))
    if kind == BLOB:
        (n,) = r.unpack(_U32)
        return bytes(r.take(n))
    if kind == TEXT:
        return r.text()
    raise AssertionError(kind)  # pragma: no cover


def _normalise(kind: int, value: Any) -> Any:
    if kind in (U64_LIST, REF_LIST, ENTRY_LIST):
        return tuple(tuple(v) if kind == ENTRY_LIST else v for v in value)
    if kind == BLOB:
        return bytes(value)
    return value


def _pack_fields(out: bytearray, kinds: tuple[int, ...], body: tuple) -> None:
    if len(body) != len(kinds):
        raise MalformedFrame(f"expected {len(kinds)} fields, got {len(body)}")
    for kind, value in zip(kinds, body):
        _put(out, kind, value)


def _finish(out: bytearray) -> bytes:
    n = len(out) - _LEN.size
    if n > MAX_FRAME:
        raise MalformedFrame(f"frame of {n} bytes exceeds limit")
    _LEN.pack_into(out, 0, n)
    return bytes(out)


# --------------------------------------------------------------------------
# frames


def encode_request(req: Request) -> bytes:
    op = Op(req.opcode)
    out = bytearray(_LEN.size)
    out += _HEAD.pack(req.request_id, op)
    _pack_fields(out, REQUEST_FIELDS[op], req.body)
    return _finish(out)


def encode_response(resp: Response) -> bytes:
    out = bytearray(_LEN.size)
    out += _HEAD.pack(resp.request_id, resp.opcode)
    out += _U8.pack(resp.status)
    if resp.status == Status.OK:
        _pack_fields(out, RESPONSE_FIELDS[Op(resp.opcode)], resp.body)
    else:
        _pack_fields(out, ERROR_FIELDS, resp.body)
    return _finish(out)


def _split(frame: bytes | memoryview) -> _Reader:
    if len(frame) < _LEN.size:
        raise MalformedFrame("truncated length prefix")
    (n,) = _LEN.unpack_from(frame, 0)
    if n != len(frame) - _LEN.size:
        raise MalformedFrame(f"length field says {n}, frame carries {len(frame) - _LEN.size}")
    if n < _HEAD.size:
        raise MalformedFrame("truncated header")
    return _Reader(frame, _LEN.size)


def _done(r: _Reader) -> None:
    if r.pos != len(r.data):
        raise MalformedFrame(f"{len(r.data) - r.pos} trailing bytes")


def decode_request(frame: bytes | memoryview) -> Request:
    r = _split(frame)
    request_id, opcode = r.unpack(_HEAD)
    try:
        op = Op(opcode)
    except ValueError:
        raise UnknownOpcode(request_id, opcode) from None
    body = tuple(_get(r, k) for k in REQUEST_FIELDS[op])
    _done(r)
    return Request(request_id, op, body)


def decode_response(frame: bytes | memoryview) -> Response:
    r = _split(frame)
    request_id, opcode = r.unpack(_HEAD)
    (status,) = r.unpack(_U8)
    if status == Status.OK:
        try:
            kinds = RESPONSE_FIELDS[Op(opcode)]
        except ValueError:
            raise UnknownOpcode(request_id, opcode) from None
    elif status == Status.ERROR:
        kinds = ERROR_FIELDS
    else:
        raise MalformedFrame(f"bad status byte {status}")
    body = tuple(_get(r, k) for k in kinds)
    _done(r)
    return Response(request_id, Op(opcode) if opcode in Op._value2member_map_ else opcode, Status(status), body)


def read_frame(stream: BinaryIO) -> bytes | None:
    """Read one whole frame; ``None`` on clean EOF before any byte."""
    head = stream.read(_LEN.size)
    if not head:
        return None
    if len(head) < _LEN.size:
        raise MalformedFrame("connection closed inside length prefix")
    (n,) = _LEN.unpack(head)
    if n > MAX_FRAME:
        raise MalformedFrame(f"frame of {n} bytes exceeds limit")
    rest = stream.read(n)
    if len(rest) < n:
        raise MalformedFrame("connection closed inside frame")
    return head + rest


def request(request_id: int, opcode: Op, *body: Any) -> Request:
    kinds = REQUEST_FIELDS[Op(opcode)]
    return Request(request_id, Op(opcode), tuple(_normalise(k, v) for k, v in zip(kinds, body)))


def response(request_id: int, opcode: Op, *body: Any) -> Response:
    kinds = RESPONSE_FIELDS[Op(opcode)]
    return Response(request_id, Op(opcode), Status.OK, tuple(_normalise(k, v) for k, v in zip(kinds, body)))


def error_response(request_id: int, opcode: int, code: int, message: str) -> Response:
    return Response(request_id, opcode, Status.ERROR, (code, message))
