"""Node graph middleware with emulated hardware threads.

Nodes talk over topics, services and actions.  Any node can run as an
ordinary software thread or as a hardware thread that reaches the middleware
only through a word-oriented command channel (OSIF) served by a delegate,
and touches message data only through word-aligned reads and writes into a
shared 32-bit arena (MEMIF).
"""

from .api import Behavior, Dispatcher, FunctionBehavior, NodeApi, Op, ResourceTable, Status, StatusError
from .arena import Arena
from .config import ConfigError, ProjectConfig, parse_config, render_config
from .hwthread import EventLog, HardwareRuntime, HardwareThread, ProtocolViolation, SlotOccupiedError
from .middleware import Graph
from .msg import MessageInstance, TypeHandle, TypeRegistry, alloc_message, deserialize, serialize
from .system import System, instantiate
from .transport import PeerConfig, Transport, start_transport

__all__ = [
    "Arena",
    "Behavior",
    "ConfigError",
    "Dispatcher",
    "EventLog",
    "FunctionBehavior",
    "Graph",
    "HardwareRuntime",
    "HardwareThread",
    "MessageInstance",
    "NodeApi",
    "Op",
    "PeerConfig",
    "ProjectConfig",
    "ProtocolViolation",
    "ResourceTable",
    "SlotOccupiedError",
    "Status",
    "StatusError",
    "System",
    "Transport",
    "TypeHandle",
    "TypeRegistry",
    "alloc_message",
    "deserialize",
    "instantiate",
    "parse_config",
    "render_config",
    "serialize",
    "start_transport",
]
