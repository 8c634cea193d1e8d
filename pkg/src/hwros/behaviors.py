"""Node bodies for the benchmark and example applications.

Every behavior here talks to the system only through ``NodeApi``: opcode
calls for middleware operations and ``mem_read``/``mem_write`` for payload
bytes.  Field positions come from the registered layouts, the way an HLS
node would use ``OFFSETOF``.
"""

from __future__ import annotations

import time
from typing import Callable, Dict, List, Optional, Type

import numpy as np

from .api import Behavior, NodeApi
from .msg import TypeHandle
from .workloads import workload_copy, workload_inverse_kinematics, workload_sobel, workload_sort

__all__ = [
    "BEHAVIORS",
    "ConstantPublisher",
    "CopyNode",
    "DipNode",
    "InverseKinematicsNode",
    "SobelNode",
    "SobelServiceNode",
    "SortNode",
    "read_sequence",
    "write_sequence",
]


def read_sequence(api: NodeApi, msg: int, t: TypeHandle, path: str, elem_size: int = 1) -> bytes:
    ptr = api.read_u32(msg + t.offset_of(path + ".data"))
    n = api.read_u32(msg + t.offset_of(path + ".size"))
    return api.mem_read(ptr, n * elem_size) if n else b""


def write_sequence(api: NodeApi, msg: int, t: TypeHandle, path: str, data: bytes, elem_size: int = 1) -> None:
    n = len(data) // elem_size
    cap = api.read_u32(msg + t.offset_of(path + ".capacity"))
    if n > cap:
        raise ValueError(f"{path}: {n} elements exceed capacity {cap}")
    if n:
        api.mem_write(api.read_u32(msg + t.offset_of(path + ".data")), data)
    api.write_u32(msg + t.offset_of(path + ".size"), n)


class _TimedNode(Behavior):
    """Keeps per-message processing times (take returned -> publish issued)."""

    def __init__(self) -> None:
        self.node_times_us: List[float] = []

    def _mark(self) -> float:
        return time.perf_counter()

    def _done(self, t0: float) -> None:
        self.node_times_us.append((time.perf_counter() - t0) * 1e6)


class CopyNode(_TimedNode):
    """Ping-pong peer: copy each message into a fresh local message and republish it.

    Works on any type with a ``data`` byte sequence; other u32 scalars are
    carried over unchanged.
    """

    def __init__(self, sub: Optional[str] = None, pub: Optional[str] = None) -> None:
        super().__init__()
        self._names = (sub, pub)
        self.node_sizes: List[int] = []

    def setup(self, api: NodeApi) -> None:
        sub, pub = self._names
        self.sub = api.handle(sub) if sub else api.find("sub")
        self.pub = api.handle(pub) if pub else api.find("pub")
        self.t = api.endpoint_type(self.sub)
        self.out_msg, self.out_variant = api.msg_for(self.pub)
        self.scalars = [o for p, (o, k) in self.t.layout.offsets.items() if k == "u32" and "." not in p]

    def step(self, api: NodeApi) -> None:
        m = api.subscriber_take(self.sub)
        t0 = self._mark()
        data = workload_copy(read_sequence(api, m, self.t, "data"))
        out = api.msg_alloc(self.out_msg, self.out_variant, len(data))
        for off in self.scalars:
            api.write_u32(out + off, api.read_u32(m + off))
        write_sequence(api, out, self.t, "data", data)
        self._done(t0)
        self.node_sizes.append(len(data))
        api.publisher_publish(self.pub, out)
        api.msg_free(out)
        api.msg_free(m)


def _read_image(api: NodeApi, msg: int, t: TypeHandle, prefix: str = ""):
    h = api.read_u32(msg + t.offset_of(prefix + "height"))
    w = api.read_u32(msg + t.offset_of(prefix + "width"))
    step = api.read_u32(msg + t.offset_of(prefix + "step"))
    return h, w, step, read_sequence(api, msg, t, prefix + "data")


def _write_image(api: NodeApi, msg: int, t: TypeHandle, h: int, w: int, step: int, data: bytes,
                 prefix: str = "") -> None:
    api.write_u32(msg + t.offset_of(prefix + "height"), h)
    api.write_u32(msg + t.offset_of(prefix + "width"), w)
    api.write_u32(msg + t.offset_of(prefix + "step"), step)
    write_sequence(api, msg, t, prefix + "data", data)


def _sobel(h: int, w: int, step: int, data: bytes) -> bytes:
    channels = step // w if w else 0
    return workload_sobel(data, w, h, channels)


class SobelNode(_TimedNode):
    """Topic-to-topic Sobel filter; the filtered image is written back in place."""

    def setup(self, api: NodeApi) -> None:
        self.sub = api.find("sub")
        self.pub = api.find("pub")
        self.t = api.endpoint_type(self.sub)

    def step(self, api: NodeApi) -> None:
        m = api.subscriber_take(self.sub)
        t0 = self._mark()
        h, w, step, data = _read_image(api, m, self.t)
        _write_image(api, m, self.t, h, w, step, _sobel(h, w, step, data))
        self._done(t0)
        api.publisher_publish(self.pub, m)
        api.msg_free(m)


class SobelServiceNode(_TimedNode):
    """Service server filtering the image carried in each request."""

    def setup(self, api: NodeApi) -> None:
        self.srv = api.find("srvs")
        self.req_t = api.endpoint_type(self.srv, "in")
        self.res_t = api.endpoint_type(self.srv, "out")
        self.res_msg, self.res_variant = api.msg_for(self.srv, "out")

    def step(self, api: NodeApi) -> None:
        req = api.serviceserver_take(self.srv)
        t0 = self._mark()
        h, w, step, data = _read_image(api, req, self.req_t, "img.")
        filtered = _sobel(h, w, step, data)
        res = api.msg_alloc(self.res_msg, self.res_variant, len(filtered))
        _write_image(api, res, self.res_t, h, w, step, filtered, "img.")
        self._done(t0)
        api.serviceserver_send_response(self.srv, res)
        api.msg_free(res)
        api.msg_free(req)


class DipNode(_TimedNode):
    """Image node that offloads filtering to a service and publishes the result."""

    def setup(self, api: NodeApi) -> None:
        self.sub = api.find("sub")
        self.pub = api.find("pub")
        self.cli = api.find("srvc")
        self.img_t = api.endpoint_type(self.sub)
        self.req_t = api.endpoint_type(self.cli, "out")
        self.res_t = api.endpoint_type(self.cli, "in")
        self.req_msg, self.req_variant = api.msg_for(self.cli, "out")

    def step(self, api: NodeApi) -> None:
        m = api.subscriber_take(self.sub)
        t0 = self._mark()
        h, w, step, data = _read_image(api, m, self.img_t)
        req = api.msg_alloc(self.req_msg, self.req_variant, len(data))
        _write_image(api, req, self.req_t, h, w, step, data, "img.")
        api.serviceclient_send_request(self.cli, req)
        res = api.serviceclient_take(self.cli)
        h, w, step, filtered = _read_image(api, res, self.res_t, "img.")
        _write_image(api, m, self.img_t, h, w, step, filtered)
        self._done(t0)
        api.publisher_publish(self.pub, m)
        for addr in (res, req, m):
            api.msg_free(addr)


class SortNode(_TimedNode):
    """Sorts the u32 ``data`` sequence of each message in place and republishes it."""

    def setup(self, api: NodeApi) -> None:
        self.sub = api.find("sub")
        self.pub = api.find("pub")
        self.t = api.endpoint_type(self.sub)

    def step(self, api: NodeApi) -> None:
        m = api.subscriber_take(self.sub)
        t0 = self._mark()
        raw = read_sequence(api, m, self.t, "data", 4)
        values = np.frombuffer(raw, dtype="<u4")
        out = np.asarray(workload_sort(values), dtype="<u4").tobytes()
        write_sequence(api, m, self.t, "data", out, 4)
        self._done(t0)
        api.publisher_publish(self.pub, m)
        api.msg_free(m)


class InverseKinematicsNode(_TimedNode):
    """Packed Q8.6 angle pair in, 10-bit servo PWM word out (``std_msgs/UInt32``)."""

    def setup(self, api: NodeApi) -> None:
        self.sub = api.find("sub")
        self.pub = api.find("pub")
        self.off = api.endpoint_type(self.sub).offset_of("data")

    def step(self, api: NodeApi) -> None:
        m = api.subscriber_take(self.sub)
        t0 = self._mark()
        api.write_u32(m + self.off, workload_inverse_kinematics(api.read_u32(m + self.off)))
        self._done(t0)
        api.publisher_publish(self.pub, m)
        api.msg_free(m)


class ConstantPublisher(Behavior):
    """Publishes a fixed u32 on every step; ``limit`` bounds the number of messages."""

    def __init__(self, value: int = 0xC0FFEE, limit: Optional[int] = None, period: float = 0.0) -> None:
        self.value = value
        self.limit = limit
        self.period = period
        self.sent = 0

    def setup(self, api: NodeApi) -> None:
        self.pub = api.find("pub")
        self.msg, self.variant = api.msg_for(self.pub)
        self.off = api.endpoint_type(self.pub).offset_of("data")

    def step(self, api: NodeApi) -> None:
        if self.limit is not None and self.sent >= self.limit:
            time.sleep(0.01)
            return
        m = api.msg_alloc(self.msg, self.variant)
        api.write_u32(m + self.off, self.value)
        api.publisher_publish(self.pub, m)
        api.msg_free(m)
        self.sent += 1
        if self.period:
            time.sleep(self.period)


BEHAVIORS: Dict[str, Callable[[], Behavior]] = {
    "copy": CopyNode,
    "sobel": SobelNode,
    "sobel_service": SobelServiceNode,
    "dip": DipNode,
    "sort": SortNode,
    "inverse_kinematics": InverseKinematicsNode,
    "constant": ConstantPublisher,
}
