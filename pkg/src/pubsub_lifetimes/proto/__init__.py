"""Wire protocol, broker daemon and client for the multi-process mode."""

from .client import RemoteBroker, RemoteNode, connect
from .frames import (
    PROTOCOL_VERSION,
    Op,
    Request,
    Response,
    Status,
    decode_request,
    decode_response,
    encode_request,
    encode_response,
)
from .server import BrokerServer

__all__ = [
    "PROTOCOL_VERSION",
    "BrokerServer",
    "Op",
    "RemoteBroker",
    "RemoteNode",
    "Request",
    "Response",
    "Status",
    "connect",
    "decode_request",
    "decode_response",
    "encode_request",
    "encode_response",
]
