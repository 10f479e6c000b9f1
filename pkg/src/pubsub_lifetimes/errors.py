"""Exception hierarchy shared by every layer of the middleware."""

from __future__ import annotations


class PubSubError(Exception):
    """Base class for all middleware errors."""


# handle / arena
class InvalidHandle(PubSubError):
    """Handle was invalidated by publish, already published, or has the wrong role."""


class PoisonedPayload(PubSubError):
    """A live handle resolved a reclaimed slot: premature reclamation (R1 breach)."""


class ArenaExhausted(PubSubError):
    pass


class UnknownRef(PubSubError):
    pass


class DoubleReclaim(PubSubError):
    pass


# broker
class IdSpaceExhausted(PubSubError):
    pass


class UnknownEndpoint(PubSubError):
    pass


class UnknownEntry(PubSubError):
    pass


class BitNotSet(PubSubError):
    pass


class TopicGone(PubSubError):
    pass


class UnknownTopic(PubSubError):
    pass


# notify
class QueueGone(PubSubError):
    pass


class Timeout(PubSubError):
    pass


# proto
class MalformedFrame(PubSubError):
    pass


class RemoteError(PubSubError):
    """Broker answered with an error code that has no local exception class."""


# racelab
class BoundExceeded(PubSubError):
    pass


class MalformedTrace(PubSubError):
    pass


# bench
class CapacityExceeded(PubSubError):
    pass


class SpawnFailure(PubSubError):
    pass


class EmptySampleSet(PubSubError):
    pass


class InsufficientPoints(PubSubError):
    pass


class IoFailure(PubSubError):
    pass
