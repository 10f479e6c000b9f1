"""Zero-copy publish/subscribe middleware with cross-process message lifetimes."""

from .arena import ArenaRef, ArenaRegistry, InProcArena, ShmArena
from .broker import Broker, Durability, GlobalUpdateCounters, PublishResult, QoS, ReceivedEntry
from .errors import *  # noqa: F401,F403
from .handle import (
    ControlBlock,
    Domain,
    MessageHandle,
    Node,
    PublishReceipt,
    Publisher,
    Role,
    Subscriber,
    access,
    clone_handle,
    drop_handle,
    loan,
    publish,
)
from .notify import Delivery, DeliveryMode, EventLoop, Mode, WakeupQueue, notify_subscriber, poll_loop_step

__version__ = "0.1.0"
