"""Process-local node graph: topics, services and actions over the arena.

Messages travel between endpoints as serialized snapshots.  A snapshot is
materialized into fresh arena blocks only when the receiving endpoint takes
it, so the address handed back is always a private copy owned by the taker.
"""

from __future__ import annotations

import collections
import hashlib
import itertools
import logging
import os
import threading
import time
from dataclasses import dataclass
from typing import Any, Dict, List, Optional, Tuple

from .arena import Arena
from .msg import MessageInstance, TypeHandle, TypeRegistry, decode_value, encode_value, write_value

log = logging.getLogger(__name__)

DEFAULT_QUEUE_DEPTH = 8
DEFAULT_POLLING_US = 10000

_graph_ids = itertools.count()


class MiddlewareError(Exception):
    pass


class DuplicateNameError(MiddlewareError):
    pass


class TypeMismatchError(MiddlewareError):
    pass


class TakeTimeout(MiddlewareError, TimeoutError):
    pass


class UnknownCorrelationError(MiddlewareError):
    pass


class AlreadyAnsweredError(UnknownCorrelationError):
    pass


class ServiceUnavailableError(MiddlewareError):
    pass


class UnknownGoalError(MiddlewareError):
    pass


class GoalStateError(MiddlewareError):
    """Feedback or result for a goal that has already finished."""


@dataclass
class Envelope:
    name: str
    correlation_id: int
    source: str
    payload: Optional[bytes] = None
    address: Optional[int] = None

    def __post_init__(self) -> None:
        if (self.payload is None) == (self.address is None):
            raise ValueError("envelope carries exactly one of payload bytes or an arena address")


def service_fingerprint(request: TypeHandle, response: TypeHandle) -> bytes:
    return hashlib.sha256(b"srv" + request.fingerprint + response.fingerprint).digest()[:8]


def _deadline(timeout: Optional[float]) -> Optional[float]:
    return None if timeout is None else time.monotonic() + timeout


def _remaining(deadline: Optional[float]) -> Optional[float]:
    return None if deadline is None else max(0.0, deadline - time.monotonic())


class Graph:
    """All nodes of one process, sharing one arena.

    ``tracer`` (optional) receives ``record(kind, **info)`` calls at the points
    where the middleware stores a message into the arena.
    """

    def __init__(self, registry: Optional[TypeRegistry] = None, arena: Optional[Arena] = None,
                 tracer=None, name: Optional[str] = None) -> None:
        self.registry = registry if registry is not None else TypeRegistry()
        self.arena = arena if arena is not None else Arena()
        self.tracer = tracer
        gid = next(_graph_ids)
        self.name = name or f"graph-{os.getpid()}-{gid}"
        self.tag = ((os.getpid() << 8) ^ gid) & 0xFFFFFFFF
        self._counter = itertools.count(1)
        self._lock = threading.RLock()
        self.nodes: Dict[str, RosNode] = {}
        self.topics: Dict[str, Topic] = {}
        self.servers: Dict[str, ServiceServer] = {}
        self._clients_by_corr: Dict[int, ServiceClient] = {}
        self.transport = None

    def next_correlation_id(self) -> int:
        with self._lock:
            return (self.tag << 32) | (next(self._counter) & 0xFFFFFFFF)

    def create_node(self, name: str, owner: str = "software-thread") -> "RosNode":
        if not name:
            raise ValueError("node name must be non-empty")
        with self._lock:
            if name in self.nodes:
                raise DuplicateNameError(f"node {name!r} already exists")
            node = RosNode(self, name, owner)
            self.nodes[name] = node
            return node

    def topic(self, name: str, handle: TypeHandle) -> "Topic":
        with self._lock:
            topic = self.topics.get(name)
            if topic is None:
                topic = self.topics[name] = Topic(name, handle)
            elif topic.handle.fingerprint != handle.fingerprint:
                raise TypeMismatchError(
                    f"topic {name!r} carries {topic.handle.name}, not {handle.name}")
            return topic

    def endpoints(self) -> List["Endpoint"]:
        with self._lock:
            return [ep for node in self.nodes.values() for ep in node.endpoints]

    def attach_transport(self, transport) -> None:
        self.transport = transport

    def _announce(self, endpoint: "Endpoint") -> None:
        if self.transport is not None:
            self.transport.announce(endpoint)

    def _record(self, kind: str, **info) -> None:
        if self.tracer is not None:
            self.tracer.record(kind, **info)

    def _register_pending(self, corr: int, client: "ServiceClient") -> None:
        with self._lock:
            self._clients_by_corr[corr] = client

    # -- inbound from transport ------------------------------------------

    def deliver_publish(self, topic: str, fingerprint: bytes, correlation_id: int,
                        payload: bytes, source: str) -> int:
        with self._lock:
            t = self.topics.get(topic)
            subs = list(t.subscribers) if t is not None else []
        if t is None or t.handle.fingerprint != fingerprint:
            return 0
        env = Envelope(topic, correlation_id, source, payload=payload)
        for sub in subs:
            sub._deliver(env)
        return len(subs)

    def deliver_request(self, service: str, fingerprint: bytes, correlation_id: int,
                        payload: bytes, route: Any) -> bool:
        server = self.servers.get(service)
        if server is None or server.fingerprint != fingerprint:
            log.warning("dropping request for unknown/mismatched service %r", service)
            return False
        server._deliver_request(correlation_id, payload, route)
        return True

    def deliver_response(self, service: str, correlation_id: int, payload: bytes) -> bool:
        with self._lock:
            client = self._clients_by_corr.pop(correlation_id, None)
        if client is None:
            log.warning("dropping response %#x for %r: no waiting client", correlation_id, service)
            return False
        client._deliver_response(correlation_id, payload)
        return True


@dataclass
class Topic:
    name: str
    handle: TypeHandle

    def __post_init__(self) -> None:
        self.publishers: List[Publisher] = []
        self.subscribers: List[Subscriber] = []


class RosNode:
    def __init__(self, graph: Graph, name: str, owner: str) -> None:
        if owner not in ("software-thread", "hardware-thread"):
            raise ValueError(f"unknown node owner {owner!r}")
        self.graph = graph
        self.name = name
        self.owner = owner
        self.endpoints: List[Endpoint] = []

    def __repr__(self) -> str:
        return f"RosNode({self.name!r}, {self.owner})"

    def _add(self, ep: "Endpoint") -> "Endpoint":
        self.endpoints.append(ep)
        self.graph._announce(ep)
        return ep

    def create_publisher(self, topic: str, handle: TypeHandle) -> "Publisher":
        pub = Publisher(self, topic, handle)
        return self._add(pub)

    def create_subscriber(self, topic: str, handle: TypeHandle, queue_depth: int = DEFAULT_QUEUE_DEPTH,
                          polling_period_us: int = DEFAULT_POLLING_US) -> "Subscriber":
        sub = Subscriber(self, topic, handle, queue_depth, polling_period_us)
        return self._add(sub)

    def create_service_server(self, name: str, request: TypeHandle, response: TypeHandle,
                              polling_period_us: int = DEFAULT_POLLING_US) -> "ServiceServer":
        return self._add(ServiceServer(self, name, request, response, polling_period_us))

    def create_service_client(self, name: str, request: TypeHandle, response: TypeHandle,
                              polling_period_us: int = DEFAULT_POLLING_US) -> "ServiceClient":
        return self._add(ServiceClient(self, name, request, response, polling_period_us))

    def create_action_server(self, name: str, goal: TypeHandle, feedback: TypeHandle, result: TypeHandle,
                             polling_period_us: int = DEFAULT_POLLING_US) -> "ActionServer":
        return ActionServer(self, name, goal, feedback, result, polling_period_us)

    def create_action_client(self, name: str, goal: TypeHandle, feedback: TypeHandle, result: TypeHandle,
                             polling_period_us: int = DEFAULT_POLLING_US,
                             feedback_depth: int = 64) -> "ActionClient":
        return ActionClient(self, name, goal, feedback, result, polling_period_us, feedback_depth)


class Endpoint:
    role = "endpoint"

    def __init__(self, node: RosNode, name: str) -> None:
        if not name:
            raise ValueError(f"{self.role} name must be non-empty")
        self.node = node
        self.name = name

    @property
    def graph(self) -> Graph:
        return self.node.graph

    @property
    def fingerprint(self) -> bytes:
        raise NotImplementedError

    def __repr__(self) -> str:
        return f"{type(self).__name__}({self.node.name!r}, {self.name!r})"


def _check_type(instance: MessageInstance, handle: TypeHandle, what: str) -> None:
    if instance.handle is not handle and instance.handle.fingerprint != handle.fingerprint:
        raise TypeMismatchError(f"{what} expects {handle.name}, got {instance.handle.name}")


# -- pub/sub ----------------------------------------------------------------


class Publisher(Endpoint):
    role = "publisher"

    def __init__(self, node: RosNode, topic: str, handle: TypeHandle) -> None:
        super().__init__(node, topic)
        self.handle = handle
        self.topic = node.graph.topic(topic, handle)
        with node.graph._lock:
            self.topic.publishers.append(self)

    @property
    def fingerprint(self) -> bytes:
        return self.handle.fingerprint

    def publish(self, instance: MessageInstance, correlation_id: int = 0) -> None:
        """Snapshot ``instance`` to every matched subscriber; the caller keeps ownership."""
        _check_type(instance, self.handle, f"publisher on {self.name!r}")
        self._send(encode_value(self.handle, instance.read()), correlation_id)

    def publish_value(self, value, correlation_id: int = 0) -> None:
        self._send(encode_value(self.handle, value), correlation_id)

    def publish_serialized(self, payload: bytes, correlation_id: int = 0) -> None:
        """Publish bytes already in wire encoding for this publisher's type."""
        self._send(bytes(payload), correlation_id)

    def _send(self, payload: bytes, correlation_id: int) -> None:
        graph = self.graph
        env = Envelope(self.name, correlation_id, self.node.name, payload=payload)
        with graph._lock:
            subs = list(self.topic.subscribers)
        for sub in subs:
            sub._deliver(env)
        if graph.transport is not None:
            graph.transport.forward_publish(self.name, self.handle.fingerprint, correlation_id, payload)


class Subscriber(Endpoint):
    """Keep-last queue of ``queue_depth`` snapshots; the oldest is dropped on overflow."""

    role = "subscriber"

    def __init__(self, node: RosNode, topic: str, handle: TypeHandle, queue_depth: int,
                 polling_period_us: int) -> None:
        super().__init__(node, topic)
        if queue_depth < 1:
            raise ValueError("queue depth must be >= 1")
        self.handle = handle
        self.queue_depth = queue_depth
        self.polling_period_us = polling_period_us
        self.dropped = 0
        self.received = 0
        self._queue: collections.deque = collections.deque()
        self._cond = threading.Condition()
        self.topic = node.graph.topic(topic, handle)
        with node.graph._lock:
            self.topic.subscribers.append(self)

    @property
    def fingerprint(self) -> bytes:
        return self.handle.fingerprint

    def _deliver(self, env: Envelope) -> None:
        with self._cond:
            if len(self._queue) >= self.queue_depth:
                self._queue.popleft()
                self.dropped += 1
            self._queue.append(env)
            self.received += 1
            self._cond.notify_all()

    def pending(self) -> int:
        with self._cond:
            return len(self._queue)

    def take_envelope(self, timeout: Optional[float] = None) -> Envelope:
        with self._cond:
            if not self._cond.wait_for(lambda: self._queue, timeout):
                raise TakeTimeout(f"no message on {self.name!r} within {timeout}s")
            return self._queue.popleft()

    def materialize(self, env: Envelope) -> MessageInstance:
        graph = self.graph
        if env.payload is None:
            raise ValueError("only serialized envelopes can be materialized")
        instance = write_value(graph.arena, self.handle, decode_value(self.handle, env.payload))
        graph._record("store", endpoint=self.name, address=instance.root)
        return instance

    def take(self, timeout: Optional[float] = None) -> MessageInstance:
        """Dequeue the oldest message and store it in the arena; the caller must free it."""
        return self.materialize(self.take_envelope(timeout))


# -- services ---------------------------------------------------------------


class ServiceServer(Endpoint):
    role = "service-server"

    def __init__(self, node: RosNode, name: str, request: TypeHandle, response: TypeHandle,
                 polling_period_us: int) -> None:
        super().__init__(node, name)
        self.request_type = request
        self.response_type = response
        self.polling_period_us = polling_period_us
        self._requests: collections.deque = collections.deque()
        self._cond = threading.Condition()
        self._pending: Dict[int, Any] = {}
        self._answered: set = set()
        graph = node.graph
        with graph._lock:
            if name in graph.servers:
                raise DuplicateNameError(f"service {name!r} already has a server")
            graph.servers[name] = self

    @property
    def fingerprint(self) -> bytes:
        return service_fingerprint(self.request_type, self.response_type)

    def _deliver_request(self, corr: int, payload: bytes, route: Any) -> None:
        with self._cond:
            self._requests.append((corr, payload, route))
            self._cond.notify_all()

    def take_request(self, timeout: Optional[float] = None) -> Tuple[int, MessageInstance]:
        with self._cond:
            if not self._cond.wait_for(lambda: self._requests, timeout):
                raise TakeTimeout(f"no request for {self.name!r} within {timeout}s")
            corr, payload, route = self._requests.popleft()
            self._pending[corr] = route
        graph = self.graph
        instance = write_value(graph.arena, self.request_type, decode_value(self.request_type, payload))
        graph._record("store", endpoint=self.name, address=instance.root)
        return corr, instance

    def send_response(self, correlation_id: int, instance: MessageInstance) -> None:
        _check_type(instance, self.response_type, f"response for {self.name!r}")
        self._respond(correlation_id, encode_value(self.response_type, instance.read()))

    def send_response_value(self, correlation_id: int, value) -> None:
        self._respond(correlation_id, encode_value(self.response_type, value))

    def _respond(self, corr: int, payload: bytes) -> None:
        with self._cond:
            if corr in self._answered:
                raise AlreadyAnsweredError(f"request {corr:#x} on {self.name!r} was already answered")
            if corr not in self._pending:
                raise UnknownCorrelationError(f"no pending request {corr:#x} on {self.name!r}")
            route = self._pending.pop(corr)
            self._answered.add(corr)
        if isinstance(route, ServiceClient):
            route._deliver_response(corr, payload)
        else:
            transport = self.graph.transport
            if transport is None:
                raise ServiceUnavailableError("remote request but no transport attached")
            transport.route_response(route, self.name, corr, payload)


class ServiceClient(Endpoint):
    role = "service-client"

    def __init__(self, node: RosNode, name: str, request: TypeHandle, response: TypeHandle,
                 polling_period_us: int) -> None:
        super().__init__(node, name)
        self.request_type = request
        self.response_type = response
        self.polling_period_us = polling_period_us
        self._cond = threading.Condition()
        self._outstanding: List[int] = []
        self._responses: Dict[int, bytes] = {}

    @property
    def fingerprint(self) -> bytes:
        return service_fingerprint(self.request_type, self.response_type)

    def send_request(self, instance: MessageInstance) -> int:
        _check_type(instance, self.request_type, f"request for {self.name!r}")
        return self._request(encode_value(self.request_type, instance.read()))

    def send_request_value(self, value) -> int:
        return self._request(encode_value(self.request_type, value))

    def _request(self, payload: bytes) -> int:
        graph = self.graph
        corr = graph.next_correlation_id()
        server = graph.servers.get(self.name)
        if server is not None and server.fingerprint != self.fingerprint:
            raise TypeMismatchError(f"service {self.name!r} registered with different types")
        with self._cond:
            self._outstanding.append(corr)
        if server is not None:
            server._deliver_request(corr, payload, self)
            return corr
        graph._register_pending(corr, self)
        transport = graph.transport
        if transport is None or not transport.route_request(self.name, self.fingerprint, corr, payload):
            with graph._lock:
                graph._clients_by_corr.pop(corr, None)
            with self._cond:
                self._outstanding.remove(corr)
            raise ServiceUnavailableError(f"no server for service {self.name!r}")
        return corr

    def _deliver_response(self, corr: int, payload: bytes) -> None:
        with self._cond:
            self._responses[corr] = payload
            self._cond.notify_all()

    def take_response(self, correlation_id: Optional[int] = None,
                      timeout: Optional[float] = None) -> MessageInstance:
        """Wait for the response to ``correlation_id`` (default: oldest outstanding request)."""
        with self._cond:
            if correlation_id is None:
                if not self._outstanding:
                    raise UnknownCorrelationError(f"no outstanding request on {self.name!r}")
                correlation_id = self._outstanding[0]
            elif correlation_id not in self._outstanding:
                raise UnknownCorrelationError(f"request {correlation_id:#x} not outstanding on {self.name!r}")
            if not self._cond.wait_for(lambda: correlation_id in self._responses, timeout):
                raise TakeTimeout(f"no response {correlation_id:#x} on {self.name!r} within {timeout}s")
            payload = self._responses.pop(correlation_id)
            self._outstanding.remove(correlation_id)
        graph = self.graph
        instance = write_value(graph.arena, self.response_type, decode_value(self.response_type, payload))
        graph._record("store", endpoint=self.name, address=instance.root)
        return instance

    def call(self, instance: MessageInstance, timeout: Optional[float] = None) -> MessageInstance:
        return self.take_response(self.send_request(instance), timeout)


# -- actions ----------------------------------------------------------------
#
# An action is literally two services plus a feedback topic:
#   <name>/_goal      goal request  -> GoalAck
#   <name>/_result    GoalRef       -> result
#   <name>/feedback   feedback messages, envelope correlation id = goal id
# The goal id is the correlation id of the goal request.


def _goal_words(goal_id: int) -> Dict[str, int]:
    return {"id_lo": goal_id & 0xFFFFFFFF, "id_hi": goal_id >> 32}


def _goal_from(value) -> int:
    return value["id_lo"] | (value["id_hi"] << 32)


class ActionServer:
    role = "action-server"

    def __init__(self, node: RosNode, name: str, goal: TypeHandle, feedback: TypeHandle,
                 result: TypeHandle, polling_period_us: int) -> None:
        reg = node.graph.registry
        self.node = node
        self.name = name
        self.goal_type, self.feedback_type, self.result_type = goal, feedback, result
        self.polling_period_us = polling_period_us
        self.goal_service = node.create_service_server(
            f"{name}/_goal", goal, reg.get("action_msgs", "msg", "GoalAck"), polling_period_us)
        self.result_service = node.create_service_server(
            f"{name}/_result", reg.get("action_msgs", "msg", "GoalRef"), result, polling_period_us)
        self.feedback_publisher = node.create_publisher(f"{name}/feedback", feedback)
        self._lock = threading.Lock()
        self._goals: Dict[int, str] = {}
        self._result_requests: Dict[int, int] = {}

    def take_goal(self, timeout: Optional[float] = None) -> Tuple[int, MessageInstance]:
        goal_id, instance = self.goal_service.take_request(timeout)
        with self._lock:
            self._goals[goal_id] = "active"
        self.goal_service.send_response_value(goal_id, dict(_goal_words(goal_id), accepted=1))
        return goal_id, instance

    def _state(self, goal_id: int) -> str:
        with self._lock:
            state = self._goals.get(goal_id)
        if state is None:
            raise UnknownGoalError(f"goal {goal_id:#x} was never accepted by {self.name!r}")
        if state != "active":
            raise GoalStateError(f"goal {goal_id:#x} on {self.name!r} already finished")
        return state

    def publish_feedback(self, goal_id: int, instance: MessageInstance) -> None:
        self._state(goal_id)
        self.feedback_publisher.publish(instance, correlation_id=goal_id)

    def send_result(self, goal_id: int, instance: MessageInstance, timeout: Optional[float] = None) -> None:
        self._state(goal_id)
        _check_type(instance, self.result_type, f"result for {self.name!r}")
        deadline = _deadline(timeout)
        while True:
            with self._lock:
                corr = self._result_requests.pop(goal_id, None)
            if corr is not None:
                break
            # result requests are tiny; drain them into the goal table
            rcorr, ref = self.result_service.take_request(_remaining(deadline))
            try:
                with self._lock:
                    self._result_requests[_goal_from(ref.read())] = rcorr
            finally:
                ref.free()
        self.result_service.send_response(corr, instance)
        with self._lock:
            self._goals[goal_id] = "done"


class ActionClient:
    role = "action-client"

    def __init__(self, node: RosNode, name: str, goal: TypeHandle, feedback: TypeHandle,
                 result: TypeHandle, polling_period_us: int, feedback_depth: int) -> None:
        reg = node.graph.registry
        self.node = node
        self.name = name
        self.goal_type, self.feedback_type, self.result_type = goal, feedback, result
        self.polling_period_us = polling_period_us
        self.goal_client = node.create_service_client(
            f"{name}/_goal", goal, reg.get("action_msgs", "msg", "GoalAck"), polling_period_us)
        self.result_client = node.create_service_client(
            f"{name}/_result", reg.get("action_msgs", "msg", "GoalRef"), result, polling_period_us)
        self.feedback_subscriber = node.create_subscriber(
            f"{name}/feedback", feedback, feedback_depth, polling_period_us)
        self._lock = threading.Lock()
        self._goals: Dict[int, Dict[str, Any]] = {}
        self._order: List[int] = []
        self._stash: Dict[int, collections.deque] = collections.defaultdict(collections.deque)

    def send_goal(self, instance: MessageInstance) -> int:
        goal_id = self.goal_client.send_request(instance)
        result_corr = self.result_client.send_request_value(_goal_words(goal_id))
        with self._lock:
            self._goals[goal_id] = {"result_corr": result_corr, "acked": False, "done": False}
            self._order.append(goal_id)
        return goal_id

    def _goal(self, goal_id: Optional[int]) -> int:
        with self._lock:
            if goal_id is None:
                live = [g for g in self._order if not self._goals[g]["done"]]
                if not live:
                    raise UnknownGoalError(f"no active goal on {self.name!r}")
                return live[0]
            if goal_id not in self._goals:
                raise UnknownGoalError(f"goal {goal_id:#x} was not sent by this client")
            return goal_id

    def take_feedback(self, goal_id: Optional[int] = None, timeout: Optional[float] = None) -> MessageInstance:
        goal_id = self._goal(goal_id)
        deadline = _deadline(timeout)
        while True:
            with self._lock:
                stash = self._stash.get(goal_id)
                if stash:
                    env = stash.popleft()
                    break
            env = self.feedback_subscriber.take_envelope(_remaining(deadline))
            if env.correlation_id != goal_id:
                with self._lock:
                    self._stash[env.correlation_id].append(env)
                continue
            break
        return self.feedback_subscriber.materialize(env)

    def take_result(self, goal_id: Optional[int] = None, timeout: Optional[float] = None) -> MessageInstance:
        goal_id = self._goal(goal_id)
        deadline = _deadline(timeout)
        state = self._goals[goal_id]
        if not state["acked"]:
            ack = self.goal_client.take_response(goal_id, _remaining(deadline))
            try:
                if not ack.read()["accepted"]:
                    raise GoalStateError(f"goal {goal_id:#x} rejected")
            finally:
                ack.free()
            state["acked"] = True
        result = self.result_client.take_response(state["result_corr"], _remaining(deadline))
        with self._lock:
            state["done"] = True
        return result
