"""Wire error codes and their mapping to local exception classes."""

from __future__ import annotations

import enum

from .. import errors


class ErrorCode(enum.IntEnum):
    INTERNAL = 0
    UNKNOWN_OPCODE = 1
    MALFORMED = 2
    PROTOCOL = 3
    VERSION = 4
    UNKNOWN_ENDPOINT = 10
    TOPIC_GONE = 11
    UNKNOWN_TOPIC = 12
    UNKNOWN_ENTRY = 13
    BIT_NOT_SET = 14
    ID_SPACE_EXHAUSTED = 15
    UNKNOWN_REF = 16
    DOUBLE_RECLAIM = 17


_CLASSES: dict[ErrorCode, type[errors.PubSubError]] = {
    ErrorCode.UNKNOWN_OPCODE: errors.MalformedFrame,
    ErrorCode.MALFORMED: errors.MalformedFrame,
    ErrorCode.UNKNOWN_ENDPOINT: errors.UnknownEndpoint,
    ErrorCode.TOPIC_GONE: errors.TopicGone,
    ErrorCode.UNKNOWN_TOPIC: errors.UnknownTopic,
    ErrorCode.UNKNOWN_ENTRY: errors.UnknownEntry,
    ErrorCode.BIT_NOT_SET: errors.BitNotSet,
    ErrorCode.ID_SPACE_EXHAUSTED: errors.IdSpaceExhausted,
    ErrorCode.UNKNOWN_REF: errors.UnknownRef,
    ErrorCode.DOUBLE_RECLAIM: errors.DoubleReclaim,
}
_CODES = {cls: code for code, cls in _CLASSES.items() if code is not ErrorCode.UNKNOWN_OPCODE}


def code_for(exc: BaseException) -> ErrorCode:
    for cls in type(exc).__mro__:
        if cls in _CODES:
            return _CODES[cls]
    return ErrorCode.INTERNAL


def exception_for(code: int, message: str) -> errors.PubSubError:
    try:
        cls = _CLASSES.get(ErrorCode(code), errors.RemoteError)
    except ValueError:
        cls = errors.RemoteError
    return cls(message)
