"""The node-side API shared by software and hardware mappings.

Every middleware call a node can make is an opcode applied to a resource
handle with a few 32-bit argument words.  ``Dispatcher`` executes such a call
against the middleware and answers with a status word plus a fixed number of
result words.  A hardware thread reaches the dispatcher through its OSIF and
delegate; a software node calls it directly.  Behaviors only ever see
``NodeApi``, which is why the two mappings are interchangeable.
"""

from __future__ import annotations

import collections
import enum
import threading
from dataclasses import dataclass
from typing import Any, Callable, Dict, List, Optional, Sequence, Tuple

from . import arena as _arena
from . import middleware as mw
from .msg import MessageError, MessageInstance, TypeHandle, alloc_message

__all__ = [
    "Behavior",
    "Dispatcher",
    "FRAMES",
    "NodeApi",
    "Op",
    "Resource",
    "ResourceTable",
    "Status",
    "StatusError",
    "Stopped",
]


class Op(enum.IntEnum):
    SUBSCRIBER_TAKE = 0x0001
    PUBLISHER_PUBLISH = 0x0002
    SERVICESERVER_TAKE = 0x0010
    SERVICESERVER_SEND_RESPONSE = 0x0011
    SERVICECLIENT_SEND_REQUEST = 0x0012
    SERVICECLIENT_TAKE = 0x0013
    ACTIONSERVER_TAKE_GOAL = 0x0020
    ACTIONSERVER_PUBLISH_FEEDBACK = 0x0021
    ACTIONSERVER_SEND_RESULT = 0x0022
    ACTIONCLIENT_SEND_GOAL = 0x0023
    ACTIONCLIENT_TAKE_FEEDBACK = 0x0024
    ACTIONCLIENT_TAKE_RESULT = 0x0025
    MSG_ALLOC = 0x0030
    MSG_FREE = 0x0031


class Status(enum.IntEnum):
    OK = 0
    TIMEOUT = 1
    TYPE_MISMATCH = 2
    PROTOCOL_ERROR = 3
    UNKNOWN_HANDLE = 4
    OUT_OF_MEMORY = 5
    UNKNOWN_ID = 6
    INVALID_STATE = 7
    UNAVAILABLE = 8
    MEMORY_FAULT = 9
    STOPPED = 10


# opcode -> (argument words after the handle, result words after the status)
FRAMES: Dict[int, Tuple[int, int]] = {
    Op.SUBSCRIBER_TAKE: (0, 1),
    Op.PUBLISHER_PUBLISH: (1, 0),
    Op.SERVICESERVER_TAKE: (0, 1),
    Op.SERVICESERVER_SEND_RESPONSE: (1, 0),
    Op.SERVICECLIENT_SEND_REQUEST: (1, 0),
    Op.SERVICECLIENT_TAKE: (0, 1),
    Op.ACTIONSERVER_TAKE_GOAL: (0, 1),
    Op.ACTIONSERVER_PUBLISH_FEEDBACK: (1, 0),
    Op.ACTIONSERVER_SEND_RESULT: (1, 0),
    Op.ACTIONCLIENT_SEND_GOAL: (1, 0),
    Op.ACTIONCLIENT_TAKE_FEEDBACK: (0, 1),
    Op.ACTIONCLIENT_TAKE_RESULT: (0, 1),
    Op.MSG_ALLOC: (2, 1),
    Op.MSG_FREE: (1, 0),
}


def frame_shape(opcode: int) -> Tuple[int, int]:
    """Command length and response length in words; unknown opcodes get (2, 1)."""
    args, results = FRAMES.get(opcode, (0, 0))
    return 2 + args, 1 + results


class StatusError(Exception):
    def __init__(self, status: int, opcode: int = 0) -> None:
        self.status = status
        self.opcode = opcode
        try:
            label = Status(status).name
        except ValueError:
            label = str(status)
        try:
            op = Op(opcode).name
        except ValueError:
            op = hex(opcode)
        super().__init__(f"{op} failed with status {label}")


class Stopped(Exception):
    """Raised inside blocking calls once the owning context is asked to stop."""


@dataclass
class Resource:
    name: str
    kind: str  # msg, sub, pub, srvs, srvc, acts, actc
    obj: Any


class ResourceTable:
    """Resources of one node, addressed by small integer handles."""

    def __init__(self) -> None:
        self.entries: List[Resource] = []
        self._by_name: Dict[str, int] = {}

    def add(self, name: str, kind: str, obj: Any) -> int:
        if name in self._by_name:
            raise ValueError(f"duplicate resource {name!r}")
        self._by_name[name] = len(self.entries)
        self.entries.append(Resource(name, kind, obj))
        return len(self.entries) - 1

    def handle(self, name: str) -> int:
        try:
            return self._by_name[name]
        except KeyError:
            raise KeyError(f"no resource named {name!r}") from None

    def find(self, kind: str) -> int:
        hits = [i for i, r in enumerate(self.entries) if r.kind == kind]
        if len(hits) != 1:
            raise KeyError(f"expected exactly one {kind} resource, found {len(hits)}")
        return hits[0]

    def get(self, handle: int, kind: str) -> Any:
        if not 0 <= handle < len(self.entries) or self.entries[handle].kind != kind:
            raise LookupError(handle)
        return self.entries[handle].obj

    def types(self, handle: int) -> Tuple[TypeHandle, ...]:
        return self.get(handle, "msg")


def _status_for(exc: BaseException) -> int:
    if isinstance(exc, Stopped):
        return Status.STOPPED
    if isinstance(exc, mw.TypeMismatchError):
        return Status.TYPE_MISMATCH
    if isinstance(exc, (mw.UnknownCorrelationError, mw.UnknownGoalError)):
        return Status.UNKNOWN_ID
    if isinstance(exc, mw.GoalStateError):
        return Status.INVALID_STATE
    if isinstance(exc, mw.ServiceUnavailableError):
        return Status.UNAVAILABLE
    if isinstance(exc, mw.TakeTimeout):
        return Status.TIMEOUT
    if isinstance(exc, _arena.OutOfMemoryError):
        return Status.OUT_OF_MEMORY
    if isinstance(exc, (_arena.ArenaError, MessageError)):
        return Status.MEMORY_FAULT
    if isinstance(exc, LookupError):
        return Status.UNKNOWN_HANDLE
    return Status.PROTOCOL_ERROR


class _StateError(Exception):
    pass


class Dispatcher:
    """Executes opcode calls for one node against the middleware.

    Keeps the per-node call state that the word protocol leaves implicit:
    the request currently being served, outstanding client requests and
    goals, and the instances the node owns (taken or allocated).
    """

    def __init__(self, graph: mw.Graph, table: ResourceTable,
                 stop: Optional[threading.Event] = None) -> None:
        self.graph = graph
        self.table = table
        self.stop = stop if stop is not None else threading.Event()
        self.owned: Dict[int, MessageInstance] = {}
        self._serving: Dict[int, int] = {}
        self._outstanding: Dict[int, collections.deque] = collections.defaultdict(collections.deque)
        self._goal: Dict[int, int] = {}
        self._goals: Dict[int, collections.deque] = collections.defaultdict(collections.deque)

    def _blocking(self, fn: Callable[[float], Any], polling_us: int) -> Any:
        slice_s = max(polling_us, 1) / 1e6
        while True:
            if self.stop.is_set():
                raise Stopped()
            try:
                return fn(slice_s)
            except mw.TakeTimeout:
                continue

    def _own(self, instance: MessageInstance) -> int:
        self.owned[instance.root] = instance
        return instance.root

    def _view(self, address: int, handle: TypeHandle) -> MessageInstance:
        owned = self.owned.get(address)
        if owned is not None and owned.handle.fingerprint != handle.fingerprint:
            raise mw.TypeMismatchError(f"message at {address:#x} is {owned.handle.name}, expected {handle.name}")
        return MessageInstance(handle, self.graph.arena, address)

    def execute(self, opcode: int, handle: int, args: Sequence[int] = ()) -> Tuple[int, List[int]]:
        if opcode not in FRAMES:
            return Status.PROTOCOL_ERROR, []
        n_args, n_res = FRAMES[opcode]
        if len(args) != n_args:
            return Status.PROTOCOL_ERROR, [0] * n_res
        try:
            result = self._execute(Op(opcode), handle, list(args))
        except _StateError:
            return Status.INVALID_STATE, [0] * n_res
        except Exception as exc:  # every failure becomes a status word
            return _status_for(exc), [0] * n_res
        return Status.OK, result

    def _execute(self, op: Op, h: int, args: List[int]) -> List[int]:
        t = self.table
        if op is Op.SUBSCRIBER_TAKE:
            sub = t.get(h, "sub")
            return [self._own(self._blocking(sub.take, sub.polling_period_us))]
        if op is Op.PUBLISHER_PUBLISH:
            pub = t.get(h, "pub")
            pub.publish(self._view(args[0], pub.handle))
            return []
        if op is Op.SERVICESERVER_TAKE:
            srv = t.get(h, "srvs")
            if h in self._serving:
                raise _StateError()
            corr, inst = self._blocking(srv.take_request, srv.polling_period_us)
            self._serving[h] = corr
            return [self._own(inst)]
        if op is Op.SERVICESERVER_SEND_RESPONSE:
            srv = t.get(h, "srvs")
            if h not in self._serving:
                raise _StateError()
            view = self._view(args[0], srv.response_type)
            srv.send_response(self._serving[h], view)
            del self._serving[h]
            return []
        if op is Op.SERVICECLIENT_SEND_REQUEST:
            cli = t.get(h, "srvc")
            self._outstanding[h].append(cli.send_request(self._view(args[0], cli.request_type)))
            return []
        if op is Op.SERVICECLIENT_TAKE:
            cli = t.get(h, "srvc")
            if not self._outstanding[h]:
                raise _StateError()
            corr = self._outstanding[h][0]
            inst = self._blocking(lambda s: cli.take_response(corr, s), cli.polling_period_us)
            self._outstanding[h].popleft()
            return [self._own(inst)]
        if op is Op.ACTIONSERVER_TAKE_GOAL:
            srv = t.get(h, "acts")
            goal, inst = self._blocking(srv.take_goal, srv.polling_period_us)
            self._goal[h] = goal
            return [self._own(inst)]
        if op is Op.ACTIONSERVER_PUBLISH_FEEDBACK:
            srv = t.get(h, "acts")
            if h not in self._goal:
                raise mw.UnknownGoalError("no goal taken")
            srv.publish_feedback(self._goal[h], self._view(args[0], srv.feedback_type))
            return []
        if op is Op.ACTIONSERVER_SEND_RESULT:
            srv = t.get(h, "acts")
            if h not in self._goal:
                raise mw.UnknownGoalError("no goal taken")
            goal = self._goal[h]
            view = self._view(args[0], srv.result_type)
            self._blocking(lambda s: srv.send_result(goal, view, s), srv.polling_period_us)
            del self._goal[h]
            return []
        if op is Op.ACTIONCLIENT_SEND_GOAL:
            cli = t.get(h, "actc")
            self._goals[h].append(cli.send_goal(self._view(args[0], cli.goal_type)))
            return []
        if op is Op.ACTIONCLIENT_TAKE_FEEDBACK:
            cli = t.get(h, "actc")
            if not self._goals[h]:
                raise mw.UnknownGoalError("no goal sent")
            goal = self._goals[h][0]
            return [self._own(self._blocking(lambda s: cli.take_feedback(goal, s), cli.polling_period_us))]
        if op is Op.ACTIONCLIENT_TAKE_RESULT:
            cli = t.get(h, "actc")
            if not self._goals[h]:
                raise mw.UnknownGoalError("no goal sent")
            goal = self._goals[h][0]
            inst = self._blocking(lambda s: cli.take_result(goal, s), cli.polling_period_us)
            self._goals[h].popleft()
            return [self._own(inst)]
        if op is Op.MSG_ALLOC:
            variant, capacity = args
            types = t.types(h)
            if variant >= len(types):
                raise LookupError(h)
            th = types[variant]
            seqs = [p for p, (_, kind) in th.layout.offsets.items() if kind == "sequence"]
            return [self._own(alloc_message(self.graph.arena, th, {p: capacity for p in seqs}))]
        if op is Op.MSG_FREE:
            inst = self.owned.pop(args[0], None)
            if inst is None:
                raise mw.UnknownCorrelationError(f"{args[0]:#x} is not owned by this node")
            inst.free()
            return []
        raise AssertionError(op)

    def release(self) -> None:
        """Free every instance still owned by the node."""
        for inst in list(self.owned.values()):
            inst.free()
        self.owned.clear()


class NodeApi:
    """What a node behavior may use: opcode calls, MEMIF access and handle lookup.

    Subclasses provide ``call``, ``mem_read`` and ``mem_write``.
    """

    table: ResourceTable

    def call(self, opcode: int, handle: int, *args: int) -> List[int]:
        raise NotImplementedError

    def mem_read(self, address: int, length: int) -> bytes:
        raise NotImplementedError

    def mem_write(self, address: int, data: bytes) -> None:
        raise NotImplementedError

    # compile-time information (the OFFSETOF side of things)

    def handle(self, name: str) -> int:
        return self.table.handle(name)

    def find(self, kind: str) -> int:
        return self.table.find(kind)

    def message_type(self, handle: int, variant: int = 0) -> TypeHandle:
        return self.table.types(handle)[variant]

    def endpoint_type(self, handle: int, direction: str = "in") -> TypeHandle:
        """Type of messages an endpoint hands to (``in``) or accepts from (``out``) the node."""
        res = self.table.entries[handle]
        obj = res.obj
        if res.kind in ("sub", "pub"):
            return obj.handle
        if res.kind == "srvs":
            return obj.request_type if direction == "in" else obj.response_type
        if res.kind == "srvc":
            return obj.response_type if direction == "in" else obj.request_type
        if res.kind == "acts":
            return obj.goal_type if direction == "in" else obj.result_type
        if res.kind == "actc":
            return obj.result_type if direction == "in" else obj.goal_type
        raise KeyError(f"{res.name!r} is not an endpoint")

    def msg_for(self, handle: int, direction: str = "out") -> Tuple[int, int]:
        """(message resource handle, variant) that matches an endpoint's message type."""
        want = self.endpoint_type(handle, direction).fingerprint
        for i, res in enumerate(self.table.entries):
            if res.kind == "msg":
                for variant, th in enumerate(res.obj):
                    if th.fingerprint == want:
                        return i, variant
        raise KeyError(f"no message resource for {self.table.entries[handle].name!r}")

    def read_u32(self, address: int) -> int:
        return int.from_bytes(self.mem_read(address, 4), "little")

    def write_u32(self, address: int, value: int) -> None:
        self.mem_write(address, (value & 0xFFFFFFFF).to_bytes(4, "little"))

    # named wrappers

    def subscriber_take(self, sub: int) -> int:
        return self.call(Op.SUBSCRIBER_TAKE, sub)[0]

    def publisher_publish(self, pub: int, msg: int) -> None:
        self.call(Op.PUBLISHER_PUBLISH, pub, msg)

    def serviceserver_take(self, srv: int) -> int:
        return self.call(Op.SERVICESERVER_TAKE, srv)[0]

    def serviceserver_send_response(self, srv: int, msg: int) -> None:
        self.call(Op.SERVICESERVER_SEND_RESPONSE, srv, msg)

    def serviceclient_send_request(self, cli: int, msg: int) -> None:
        self.call(Op.SERVICECLIENT_SEND_REQUEST, cli, msg)

    def serviceclient_take(self, cli: int) -> int:
        return self.call(Op.SERVICECLIENT_TAKE, cli)[0]

    def actionserver_take_goal(self, srv: int) -> int:
        return self.call(Op.ACTIONSERVER_TAKE_GOAL, srv)[0]

    def actionserver_publish_feedback(self, srv: int, msg: int) -> None:
        self.call(Op.ACTIONSERVER_PUBLISH_FEEDBACK, srv, msg)

    def actionserver_send_result(self, srv: int, msg: int) -> None:
        self.call(Op.ACTIONSERVER_SEND_RESULT, srv, msg)

    def actionclient_send_goal(self, cli: int, msg: int) -> None:
        self.call(Op.ACTIONCLIENT_SEND_GOAL, cli, msg)

    def actionclient_take_feedback(self, cli: int) -> int:
        return self.call(Op.ACTIONCLIENT_TAKE_FEEDBACK, cli)[0]

    def actionclient_take_result(self, cli: int) -> int:
        return self.call(Op.ACTIONCLIENT_TAKE_RESULT, cli)[0]

    def msg_alloc(self, msg: int, variant: int = 0, capacity: int = 0) -> int:
        return self.call(Op.MSG_ALLOC, msg, variant, capacity)[0]

    def msg_free(self, address: int) -> None:
        self.call(Op.MSG_FREE, 0, address)

    ROS_SUBSCRIBER_TAKE = subscriber_take
    ROS_PUBLISHER_PUBLISH = publisher_publish
    ROS_SERVICESERVER_TAKE = serviceserver_take
    ROS_SERVICESERVER_SEND_RESPONSE = serviceserver_send_response
    ROS_SERVICECLIENT_SEND_REQUEST = serviceclient_send_request
    ROS_SERVICECLIENT_TAKE = serviceclient_take
    ROS_ACTIONSERVER_TAKE_GOAL = actionserver_take_goal
    ROS_ACTIONSERVER_PUBLISH_FEEDBACK = actionserver_publish_feedback
    ROS_ACTIONSERVER_SEND_RESULT = actionserver_send_result
    ROS_ACTIONCLIENT_SEND_GOAL = actionclient_send_goal
    ROS_ACTIONCLIENT_TAKE_FEEDBACK = actionclient_take_feedback
    ROS_ACTIONCLIENT_TAKE_RESULT = actionclient_take_result


class Behavior:
    """A node body: ``setup`` runs once, ``step`` runs until the node stops.

    Behaviors must touch the system only through the ``NodeApi`` they are
    given; that restriction is what keeps them mapping-independent.
    """

    def setup(self, api: NodeApi) -> None:
        pass

    def step(self, api: NodeApi) -> None:
        raise NotImplementedError


class FunctionBehavior(Behavior):
    def __init__(self, step: Callable[[NodeApi], None], setup: Optional[Callable[[NodeApi], None]] = None) -> None:
        self._step = step
        self._setup = setup

    def setup(self, api: NodeApi) -> None:
        if self._setup is not None:
            self._setup(api)

    def step(self, api: NodeApi) -> None:
        self._step(api)
