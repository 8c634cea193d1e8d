"""TCP transport joining node graphs of several processes.

Frame layout (little-endian)::

    u32 length            bytes that follow
    u8  frame type        ANNOUNCE, PUBLISH, SRV_REQUEST, SRV_RESPONSE, ACTION_FEEDBACK
    u16 name length
    ... name (utf-8)
    8   type fingerprint
    u64 correlation id
    ... payload

One connection per peer pair, opened by the peer with the lower listen
address; both sides therefore need each other in their static peer lists.
Every connection starts with a hello (an ANNOUNCE with an empty name whose
payload is the sender's listen address) followed by one ANNOUNCE per local
endpoint.  Reliability ends with the connection: frames for a peer that went
away are dropped and a link-down event is raised.
"""

from __future__ import annotations

import enum
import logging
import queue
import socket
import struct
import threading
import time
from dataclasses import dataclass, field
from typing import Callable, Dict, List, Optional, Tuple

from .msg import DEFAULT_MAX_MESSAGE_SIZE

log = logging.getLogger(__name__)

_HEAD = struct.Struct("<BH")
_TAIL = struct.Struct("<8sQ")
_LEN = struct.Struct("<I")
FINGERPRINT_SIZE = 8


class FrameType(enum.IntEnum):
    ANNOUNCE = 0
    PUBLISH = 1
    SRV_REQUEST = 2
    SRV_RESPONSE = 3
    ACTION_FEEDBACK = 4


class Role(enum.IntEnum):
    HELLO = 0
    SUBSCRIBER = 1
    PUBLISHER = 2
    SERVER = 3
    CLIENT = 4


_ROLES = {
    "subscriber": Role.SUBSCRIBER,
    "publisher": Role.PUBLISHER,
    "service-server": Role.SERVER,
    "service-client": Role.CLIENT,
}


class TransportError(Exception):
    pass


class FrameError(TransportError, ValueError):
    pass


@dataclass(frozen=True)
class WireFrame:
    frame_type: FrameType
    name: str
    fingerprint: bytes = bytes(FINGERPRINT_SIZE)
    correlation_id: int = 0
    payload: bytes = b""


def encode_frame(frame: WireFrame, max_message_size: int = DEFAULT_MAX_MESSAGE_SIZE) -> bytes:
    name = frame.name.encode("utf-8")
    if len(name) > 0xFFFF:
        raise FrameError("name too long")
    if len(frame.fingerprint) != FINGERPRINT_SIZE:
        raise FrameError("fingerprint must be 8 bytes")
    if len(frame.payload) > max_message_size:
        raise FrameError(f"payload of {len(frame.payload)} bytes exceeds {max_message_size}")
    body_len = _HEAD.size + len(name) + _TAIL.size + len(frame.payload)
    return b"".join((
        _LEN.pack(body_len),
        _HEAD.pack(int(frame.frame_type), len(name)),
        name,
        _TAIL.pack(frame.fingerprint, frame.correlation_id),
        frame.payload,
    ))


def decode_body(body: bytes, max_message_size: int = DEFAULT_MAX_MESSAGE_SIZE) -> WireFrame:
    view = memoryview(body)
    if len(view) < _HEAD.size + _TAIL.size:
        raise FrameError("truncated frame")
    ftype, name_len = _HEAD.unpack_from(view, 0)
    pos = _HEAD.size + name_len
    if pos + _TAIL.size > len(view):
        raise FrameError("truncated frame")
    try:
        ftype = FrameType(ftype)
    except ValueError:
        raise FrameError(f"unknown frame type {ftype}") from None
    name = bytes(view[_HEAD.size:pos]).decode("utf-8")
    fp, corr = _TAIL.unpack_from(view, pos)
    payload = bytes(view[pos + _TAIL.size:])
    if len(payload) > max_message_size:
        raise FrameError("payload exceeds max message size")
    return WireFrame(ftype, name, fp, corr, payload)


def decode_frame(data: bytes, max_message_size: int = DEFAULT_MAX_MESSAGE_SIZE) -> WireFrame:
    if len(data) < _LEN.size:
        raise FrameError("truncated frame")
    (n,) = _LEN.unpack_from(data, 0)
    if len(data) != _LEN.size + n:
        raise FrameError(f"length prefix {n} does not match {len(data) - _LEN.size} bytes")
    return decode_body(data[_LEN.size:], max_message_size)


def _recv_exact(sock: socket.socket, n: int) -> Optional[bytearray]:
    buf = bytearray(n)
    view = memoryview(buf)
    got = 0
    while got < n:
        k = sock.recv_into(view[got:], min(n - got, 1 << 20))
        if k == 0:
            return None
        got += k
    return buf


def parse_address(text: str) -> Tuple[str, int]:
    host, _, port = text.strip().rpartition(":")
    if not host or not port.isdigit():
        raise ValueError(f"expected host:port, got {text!r}")
    return host, int(port)


@dataclass
class PeerConfig:
    listen: Tuple[str, int]
    peers: List[Tuple[str, int]] = field(default_factory=list)

    def __post_init__(self) -> None:
        self.listen = tuple(self.listen)
        self.peers = [tuple(p) for p in self.peers]
        if self.listen in self.peers:
            raise ValueError("peer list contains the local address")
        if len(set(self.peers)) != len(self.peers):
            raise ValueError("duplicate peers")

    @classmethod
    def parse(cls, listen: str, peers: str = "") -> "PeerConfig":
        return cls(parse_address(listen), [parse_address(p) for p in peers.split(",") if p.strip()])


def _addr_text(addr: Tuple[str, int]) -> str:
    return f"{addr[0]}:{addr[1]}"


class Connection:
    def __init__(self, transport: "Transport", sock: socket.socket, dialed: bool) -> None:
        self.transport = transport
        self.sock = sock
        self.dialed = dialed
        self.peer: Optional[str] = None
        self.closed = threading.Event()
        self._out: queue.Queue = queue.Queue()
        sock.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)
        self._reader = threading.Thread(target=self._read_loop, daemon=True, name="tcp-reader")
        self._writer = threading.Thread(target=self._write_loop, daemon=True, name="tcp-writer")

    def start(self) -> None:
        self._reader.start()
        self._writer.start()

    def send(self, data: bytes) -> bool:
        if self.closed.is_set():
            return False
        self._out.put(data)
        return True

    def _write_loop(self) -> None:
        try:
            while True:
                data = self._out.get()
                if data is None or self.closed.is_set():
                    return
                self.sock.sendall(data)
        except OSError:
            self.close()

    def _read_loop(self) -> None:
        limit = self.transport.max_message_size + _HEAD.size + 0xFFFF + _TAIL.size
        try:
            while not self.closed.is_set():
                head = _recv_exact(self.sock, _LEN.size)
                if head is None:
                    break
                (n,) = _LEN.unpack(head)
                if n > limit:
                    raise FrameError(f"frame of {n} bytes exceeds limit")
                body = _recv_exact(self.sock, n)
                if body is None:
                    break
                self.transport._handle(self, decode_body(body, self.transport.max_message_size))
        except (OSError, FrameError) as exc:
            if not self.closed.is_set():
                log.warning("connection to %s failed: %s", self.peer, exc)
        finally:
            self.close()

    def close(self) -> None:
        if self.closed.is_set():
            return
        self.closed.set()
        self._out.put(None)
        try:
            self.sock.shutdown(socket.SHUT_RDWR)
        except OSError:
            pass
        self.sock.close()
        self.transport._connection_closed(self)


class Transport:
    """Links one ``Graph`` to its static peers."""

    def __init__(self, graph, config: PeerConfig, max_message_size: Optional[int] = None,
                 dial_timeout: float = 30.0) -> None:
        self.graph = graph
        self.config = config
        self.max_message_size = max_message_size or graph.registry.max_message_size
        self.dial_timeout = dial_timeout
        self.peer_id: Optional[str] = None
        self.events: List[Tuple[str, str]] = []
        self.conflicts: List[Tuple[str, str]] = []
        self.on_link_down: List[Callable[[str], None]] = []
        self._lock = threading.RLock()
        self._cond = threading.Condition(self._lock)
        self._conns: List[Connection] = []
        self.connections: Dict[str, Connection] = {}
        self.remote_subs: Dict[str, Dict[str, bytes]] = {}
        self.remote_servers: Dict[str, Dict[str, bytes]] = {}
        self._listener: Optional[socket.socket] = None
        self._closing = threading.Event()

    # -- lifecycle ------------------------------------------------------

    def start(self) -> "Transport":
        host, port = self.config.listen
        sock = socket.socket(socket.AF_INET, socket.SOCK_STREAM)
        sock.setsockopt(socket.SOL_SOCKET, socket.SO_REUSEADDR, 1)
        try:
            sock.bind((host, port))
        except OSError as exc:
            sock.close()
            raise TransportError(f"cannot bind {host}:{port}: {exc}") from exc
        sock.listen(16)
        self._listener = sock
        self.config.listen = (host, sock.getsockname()[1])
        self.peer_id = _addr_text(self.config.listen)
        self.graph.attach_transport(self)
        threading.Thread(target=self._accept_loop, daemon=True, name="tcp-accept").start()
        for peer in self.config.peers:
            if self.config.listen < peer:
                threading.Thread(target=self._dial, args=(peer,), daemon=True, name="tcp-dial").start()
        return self

    def close(self) -> None:
        self._closing.set()
        if self._listener is not None:
            try:
                self._listener.close()
            except OSError:
                pass
        with self._lock:
            conns = list(self._conns)
        for c in conns:
            c.close()
        if self.graph.transport is self:
            self.graph.transport = None

    def __enter__(self) -> "Transport":
        return self

    def __exit__(self, *exc) -> None:
        self.close()

    def _accept_loop(self) -> None:
        while not self._closing.is_set():
            try:
                sock, _ = self._listener.accept()
            except OSError:
                return
            self._setup(sock, dialed=False)

    def _dial(self, peer: Tuple[str, int]) -> None:
        deadline = time.monotonic() + self.dial_timeout
        delay = 0.02
        while not self._closing.is_set():
            try:
                sock = socket.create_connection(peer, timeout=2.0)
                sock.settimeout(None)
            except OSError:
                if time.monotonic() > deadline:
                    log.warning("giving up dialing %s", _addr_text(peer))
                    return
                time.sleep(delay)
                delay = min(delay * 2, 0.5)
                continue
            self._setup(sock, dialed=True)
            return

    def _setup(self, sock: socket.socket, dialed: bool) -> None:
        conn = Connection(self, sock, dialed)
        with self._lock:
            self._conns.append(conn)
            conn.send(encode_frame(WireFrame(FrameType.ANNOUNCE, "", payload=bytes([Role.HELLO]) + self.peer_id.encode())))
            for ep in self.graph.endpoints():
                frame = self._announce_frame(ep)
                if frame is not None:
                    conn.send(frame)
        conn.start()

    def _connection_closed(self, conn: Connection) -> None:
        with self._lock:
            if conn in self._conns:
                self._conns.remove(conn)
            peer = conn.peer
            if peer is None or self.connections.get(peer) is not conn:
                return
            del self.connections[peer]
            for table in (self.remote_subs, self.remote_servers):
                for entries in table.values():
                    entries.pop(peer, None)
            self.events.append(("link-down", peer))
            self._cond.notify_all()
        if not self._closing.is_set():
            log.warning("link down: %s", peer)
        for cb in list(self.on_link_down):
            cb(peer)

    # -- announcements ----------------------------------------------------

    def _announce_frame(self, ep) -> Optional[bytes]:
        role = _ROLES.get(ep.role)
        if role is None:
            return None
        return encode_frame(WireFrame(FrameType.ANNOUNCE, ep.name, ep.fingerprint, 0, bytes([role])))

    def announce(self, endpoint) -> None:
        frame = self._announce_frame(endpoint)
        if frame is None:
            return
        with self._lock:
            for conn in self._conns:
                conn.send(frame)
            if endpoint.role == "publisher":
                for peer, fp in self.remote_subs.get(endpoint.name, {}).items():
                    if fp != endpoint.fingerprint:
                        self._conflict(endpoint.name, peer)

    def _conflict(self, name: str, peer: str) -> None:
        self.conflicts.append((name, peer))
        log.warning("type fingerprint conflict on %r with peer %s; endpoints left unmatched", name, peer)

    def _on_announce(self, conn: Connection, frame: WireFrame) -> None:
        if not frame.payload:
            raise FrameError("empty announce")
        role = frame.payload[0]
        with self._lock:
            if role == Role.HELLO:
                peer = frame.payload[1:].decode()
                conn.peer = peer
                old = self.connections.get(peer)
                if old is not None and old is not conn:
                    log.warning("second connection from %s replaces the first", peer)
                self.connections[peer] = conn
                self.events.append(("link-up", peer))
                self._cond.notify_all()
                return
            peer = conn.peer
            if peer is None:
                raise FrameError("announce before hello")
            if role == Role.SUBSCRIBER:
                self.remote_subs.setdefault(frame.name, {})[peer] = frame.fingerprint
                topic = self.graph.topics.get(frame.name)
                if topic is not None and topic.publishers and topic.handle.fingerprint != frame.fingerprint:
                    self._conflict(frame.name, peer)
            elif role == Role.SERVER:
                self.remote_servers.setdefault(frame.name, {})[peer] = frame.fingerprint
            self._cond.notify_all()

    # -- outbound -------------------------------------------------------

    def forward_publish(self, topic: str, fingerprint: bytes, correlation_id: int, payload: bytes) -> int:
        with self._lock:
            targets = [self.connections[p] for p, fp in self.remote_subs.get(topic, {}).items()
                       if fp == fingerprint and p in self.connections]
        if not targets:
            return 0
        ftype = FrameType.ACTION_FEEDBACK if correlation_id else FrameType.PUBLISH
        data = encode_frame(WireFrame(ftype, topic, fingerprint, correlation_id, payload), self.max_message_size)
        return sum(conn.send(data) for conn in targets)

    def route_request(self, service: str, fingerprint: bytes, correlation_id: int, payload: bytes) -> bool:
        with self._lock:
            peers = sorted(p for p, fp in self.remote_servers.get(service, {}).items()
                           if fp == fingerprint and p in self.connections)
            conn = self.connections[peers[0]] if peers else None
        if conn is None:
            return False
        return conn.send(encode_frame(
            WireFrame(FrameType.SRV_REQUEST, service, fingerprint, correlation_id, payload), self.max_message_size))

    def route_response(self, peer: str, service: str, correlation_id: int, payload: bytes) -> bool:
        with self._lock:
            conn = self.connections.get(peer)
        if conn is None:
            log.warning("dropping response %#x for %r: link to %s is down", correlation_id, service, peer)
            return False
        return conn.send(encode_frame(
            WireFrame(FrameType.SRV_RESPONSE, service, bytes(FINGERPRINT_SIZE), correlation_id, payload),
            self.max_message_size))

    # -- inbound ----------------------------------------------------------

    def _handle(self, conn: Connection, frame: WireFrame) -> None:
        if frame.frame_type == FrameType.ANNOUNCE:
            self._on_announce(conn, frame)
        elif frame.frame_type in (FrameType.PUBLISH, FrameType.ACTION_FEEDBACK):
            self.graph.deliver_publish(frame.name, frame.fingerprint, frame.correlation_id,
                                       frame.payload, conn.peer)
        elif frame.frame_type == FrameType.SRV_REQUEST:
            self.graph.deliver_request(frame.name, frame.fingerprint, frame.correlation_id,
                                       frame.payload, conn.peer)
        elif frame.frame_type == FrameType.SRV_RESPONSE:
            self.graph.deliver_response(frame.name, frame.correlation_id, frame.payload)

    # -- waiting helpers --------------------------------------------------

    def wait_for(self, predicate: Callable[[], bool], timeout: float) -> bool:
        with self._cond:
            return self._cond.wait_for(predicate, timeout)

    def wait_connected(self, count: Optional[int] = None, timeout: float = 10.0) -> bool:
        want = len(self.config.peers) if count is None else count
        return self.wait_for(lambda: len(self.connections) >= want, timeout)

    def wait_for_subscriber(self, topic: str, timeout: float = 10.0) -> bool:
        return self.wait_for(lambda: any(p in self.connections for p in self.remote_subs.get(topic, {})), timeout)

    def wait_for_server(self, service: str, timeout: float = 10.0) -> bool:
        return self.wait_for(lambda: any(p in self.connections for p in self.remote_servers.get(service, {})), timeout)


def start_transport(config: PeerConfig, graph, **kwargs) -> Transport:
    return Transport(graph, config, **kwargs).start()
