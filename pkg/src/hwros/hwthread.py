"""Hardware threads, their OSIF channels and delegate threads.

A hardware thread runs a behavior against an API whose only effects are
32-bit words on its OSIF and MEMIF transactions on the arena.  Each
middleware call goes out as a command frame; the thread's delegate, a
separate execution context on the "CPU side", performs the call through the
``Dispatcher`` and writes back a response frame.  The OSFSM allows one
outstanding command at a time; breaking that rule halts the thread.
"""

from __future__ import annotations

import itertools
import logging
import queue
import threading
import time
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence

from .api import Behavior, Dispatcher, NodeApi, ResourceTable, Status, StatusError, Stopped, frame_shape
from .middleware import Graph

log = logging.getLogger(__name__)

OSIF_DEPTH = 16
WORD_MASK = 0xFFFFFFFF


class ProtocolViolation(Exception):
    """A hardware thread broke the OSIF protocol (e.g. a second outstanding command)."""


class SlotOccupiedError(Exception):
    pass


class EventLog:
    """Thread-safe, totally ordered record of protocol events."""

    def __init__(self) -> None:
        self._lock = threading.Lock()
        self.events: List[dict] = []

    def record(self, kind: str, **info) -> None:
        info.setdefault("context", threading.current_thread().name)
        with self._lock:
            info["seq"] = len(self.events)
            info["kind"] = kind
            self.events.append(info)

    def clear(self) -> None:
        with self._lock:
            self.events.clear()

    def snapshot(self) -> List[dict]:
        with self._lock:
            return list(self.events)


class Fifo:
    """Bounded blocking FIFO of 32-bit words."""

    def __init__(self, depth: int = OSIF_DEPTH) -> None:
        self.depth = depth
        self._q: queue.Queue = queue.Queue(maxsize=depth)

    def put(self, word: int, stop: threading.Event) -> None:
        if not 0 <= word <= WORD_MASK:
            raise ValueError(f"OSIF word out of range: {word}")
        while True:
            try:
                self._q.put(word, timeout=0.05)
                return
            except queue.Full:
                if stop.is_set():
                    raise Stopped()

    def get(self, stop: threading.Event) -> int:
        while True:
            try:
                return self._q.get(timeout=0.05)
            except queue.Empty:
                if stop.is_set():
                    raise Stopped()

    def __len__(self) -> int:
        return self._q.qsize()


@dataclass
class Osif:
    to_delegate: Fifo = field(default_factory=Fifo)
    to_thread: Fifo = field(default_factory=Fifo)


@dataclass
class Slot:
    slot_id: int
    occupant: Optional["HardwareThread"] = None


class HardwareThread(NodeApi):
    """Execution context of one hardware node.

    ``state`` moves ready -> running -> halted | faulted.
    """

    def __init__(self, thread_id: int, name: str, slot_id: int, behavior: Behavior,
                 table: ResourceTable, graph: Graph, osif: Osif, tracer=None) -> None:
        self.thread_id = thread_id
        self.name = name
        self.slot_id = slot_id
        self.behavior = behavior
        self.table = table
        self.arena = graph.arena
        self.osif = osif
        self.tracer = tracer
        self.stop_event = threading.Event()
        self.state = "ready"
        self.fault: Optional[BaseException] = None
        self.steps = 0
        self._outstanding: Optional[int] = None
        self._thread: Optional[threading.Thread] = None

    def __repr__(self) -> str:
        return f"HardwareThread({self.name!r}, slot={self.slot_id}, {self.state})"

    def _record(self, kind: str, **info) -> None:
        if self.tracer is not None:
            self.tracer.record(kind, thread=self.thread_id, **info)

    # -- OSFSM ----------------------------------------------------------

    def osif_send(self, words: Sequence[int]) -> None:
        """Emit one command frame; a second command before the response faults."""
        if self._outstanding is not None:
            raise ProtocolViolation(
                f"{self.name}: command {words[0]:#x} issued while {self._outstanding:#x} is outstanding")
        words = [int(w) for w in words]
        self._outstanding = words[0]
        self._record("command", opcode=words[0], handle=words[1] if len(words) > 1 else None)
        for w in words:
            self.osif.to_delegate.put(w, self.stop_event)

    def osif_receive(self) -> List[int]:
        if self._outstanding is None:
            raise ProtocolViolation(f"{self.name}: awaiting a response with no command outstanding")
        _, n = frame_shape(self._outstanding)
        words = [self.osif.to_thread.get(self.stop_event) for _ in range(n)]
        self._outstanding = None
        return words

    def call(self, opcode: int, handle: int, *args: int) -> List[int]:
        self.osif_send([opcode, handle, *args])
        status, *result = self.osif_receive()
        if status != Status.OK:
            raise StatusError(status, opcode)
        return result

    # -- MEMIF ----------------------------------------------------------

    def mem_read(self, address: int, length: int) -> bytes:
        data = self.arena.mem_read(address, length)
        self._record("memif_read", address=address, length=length)
        return data

    def mem_write(self, address: int, data: bytes) -> None:
        self.arena.mem_write(address, data)
        self._record("memif_write", address=address, length=len(data))

    # -- lifecycle ------------------------------------------------------

    def start(self) -> None:
        self.state = "running"
        self._thread = threading.Thread(target=self._run, name=f"hwt-{self.thread_id}-{self.name}", daemon=True)
        self._thread.start()

    def _run(self) -> None:
        try:
            self.behavior.setup(self)
            while not self.stop_event.is_set():
                self.behavior.step(self)
                self.steps += 1
        except Stopped:
            self.state = "halted"
        except StatusError as exc:
            if exc.status == Status.STOPPED:
                self.state = "halted"
            else:
                self._halt_on_fault(exc)
        except Exception as exc:
            self._halt_on_fault(exc)
        else:
            self.state = "halted"

    def _halt_on_fault(self, exc: BaseException) -> None:
        self.fault = exc
        self.state = "faulted"
        self.stop_event.set()
        log.warning("hardware thread %s faulted: %s", self.name, exc)

    def join(self, timeout: Optional[float] = None) -> None:
        if self._thread is not None:
            self._thread.join(timeout)

    @property
    def alive(self) -> bool:
        return self._thread is not None and self._thread.is_alive()


class Delegate:
    """CPU-side proxy that serves one hardware thread's OSIF commands."""

    def __init__(self, thread: HardwareThread, dispatcher: Dispatcher, tracer=None) -> None:
        self.thread = thread
        self.dispatcher = dispatcher
        self.tracer = tracer
        self.stop_event = dispatcher.stop
        self.served = 0
        self._thread: Optional[threading.Thread] = None

    def _record(self, kind: str, **info) -> None:
        if self.tracer is not None:
            self.tracer.record(kind, thread=self.thread.thread_id, **info)

    def start(self) -> None:
        self._thread = threading.Thread(target=self.loop, name=f"delegate-{self.thread.thread_id}", daemon=True)
        self._thread.start()

    def serve_one(self) -> None:
        osif = self.thread.osif
        stop = self.stop_event
        opcode = osif.to_delegate.get(stop)
        handle = osif.to_delegate.get(stop)
        n_cmd, n_resp = frame_shape(opcode)
        args = [osif.to_delegate.get(stop) for _ in range(n_cmd - 2)]
        self._record("dispatch", opcode=opcode, handle=handle)
        status, result = self.dispatcher.execute(opcode, handle, args)
        self._record("unblock", opcode=opcode, status=int(status))
        words = [int(status), *result]
        words += [0] * (n_resp - len(words))
        self._record("response", opcode=opcode, status=int(status),
                     address=result[0] if result else None)
        for w in words:
            osif.to_thread.put(w, stop)
        self.served += 1

    def loop(self) -> None:
        try:
            while not self.stop_event.is_set():
                self.serve_one()
        except Stopped:
            pass
        except Exception:
            log.exception("delegate for %s crashed", self.thread.name)

    def join(self, timeout: Optional[float] = None) -> None:
        if self._thread is not None:
            self._thread.join(timeout)


class SoftwareApi(NodeApi):
    """Direct-call API used when a node is mapped to a software thread."""

    def __init__(self, dispatcher: Dispatcher) -> None:
        self.dispatcher = dispatcher
        self.table = dispatcher.table
        self.arena = dispatcher.graph.arena

    def call(self, opcode: int, handle: int, *args: int) -> List[int]:
        status, result = self.dispatcher.execute(opcode, handle, args)
        if status != Status.OK:
            raise StatusError(status, opcode)
        return result

    def mem_read(self, address: int, length: int) -> bytes:
        return self.arena.mem_read(address, length)

    def mem_write(self, address: int, data: bytes) -> None:
        self.arena.mem_write(address, data)


class SoftwareNode:
    """Runs a behavior on an ordinary thread with direct middleware calls."""

    def __init__(self, name: str, behavior: Behavior, table: ResourceTable, graph: Graph) -> None:
        self.name = name
        self.behavior = behavior
        self.stop_event = threading.Event()
        self.dispatcher = Dispatcher(graph, table, self.stop_event)
        self.api = SoftwareApi(self.dispatcher)
        self.state = "ready"
        self.fault: Optional[BaseException] = None
        self.steps = 0
        self._thread: Optional[threading.Thread] = None

    def start(self) -> None:
        self.state = "running"
        self._thread = threading.Thread(target=self._run, name=f"sw-{self.name}", daemon=True)
        self._thread.start()

    def _run(self) -> None:
        try:
            self.behavior.setup(self.api)
            while not self.stop_event.is_set():
                self.behavior.step(self.api)
                self.steps += 1
            self.state = "halted"
        except (Stopped,):
            self.state = "halted"
        except StatusError as exc:
            if exc.status == Status.STOPPED:
                self.state = "halted"
            else:
                self._fault(exc)
        except Exception as exc:
            self._fault(exc)

    def _fault(self, exc: BaseException) -> None:
        self.fault = exc
        self.state = "faulted"
        log.warning("software node %s faulted: %s", self.name, exc)

    def stop(self, timeout: Optional[float] = 2.0) -> None:
        self.stop_event.set()
        if self._thread is not None:
            self._thread.join(timeout)
        self.dispatcher.release()


def run_software_node(name: str, behavior: Behavior, table: ResourceTable, graph: Graph) -> SoftwareNode:
    node = SoftwareNode(name, behavior, table, graph)
    node.start()
    return node


class HardwareRuntime:
    """Reconfigurable slots plus the hardware threads and delegates running in them."""

    def __init__(self, graph: Graph, slot_count: int, tracer=None) -> None:
        self.graph = graph
        self.slots = [Slot(i) for i in range(slot_count)]
        self.tracer = tracer
        self.threads: Dict[int, HardwareThread] = {}
        self.delegates: Dict[int, Delegate] = {}
        self._dispatchers: Dict[int, Dispatcher] = {}
        self._ids = itertools.count()
        self._lock = threading.Lock()

    def start_hardware_thread(self, name: str, slot_id: int, behavior: Behavior,
                              table: ResourceTable) -> int:
        with self._lock:
            if not 0 <= slot_id < len(self.slots):
                raise SlotOccupiedError(f"slot {slot_id} does not exist ({len(self.slots)} slots)")
            slot = self.slots[slot_id]
            if slot.occupant is not None:
                raise SlotOccupiedError(f"slot {slot_id} already hosts {slot.occupant.name!r}")
            tid = next(self._ids)
            osif = Osif()
            thread = HardwareThread(tid, name, slot_id, behavior, table, self.graph, osif, self.tracer)
            dispatcher = Dispatcher(self.graph, table, thread.stop_event)
            delegate = Delegate(thread, dispatcher, self.tracer)
            slot.occupant = thread
            self.threads[tid] = thread
            self.delegates[tid] = delegate
            self._dispatchers[tid] = dispatcher
        delegate.start()
        thread.start()
        return tid

    def stop(self, timeout: float = 2.0) -> None:
        for thread in self.threads.values():
            thread.stop_event.set()
        deadline = time.monotonic() + timeout
        for tid, thread in self.threads.items():
            thread.join(max(0.0, deadline - time.monotonic()))
            self.delegates[tid].join(max(0.0, deadline - time.monotonic()))
        for dispatcher in self._dispatchers.values():
            dispatcher.release()

    def faults(self) -> Dict[str, BaseException]:
        return {t.name: t.fault for t in self.threads.values() if t.fault is not None}
