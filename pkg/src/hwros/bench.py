"""Ping-pong roundtrip benchmark.

A harness node ``bench_pc`` publishes ``bench_msgs/Payload`` messages on
``/send`` and waits for the copy on ``/recv``; the roundtrip is measured
around that exchange with a monotonic clock.  The copy node is taken from
the configuration and runs either in the same process or, when the
configuration has a ``[Transport]`` section (or ``two_process`` is set), in
a child process connected over TCP.
"""

from __future__ import annotations

import json
import logging
import os
import signal
import socket
import statistics
import subprocess
import sys
import tempfile
import time
from dataclasses import dataclass, field
from typing import Dict, List, Mapping, Optional, Sequence

import numpy as np

from .config import ProjectConfig, render_config
from .middleware import Graph, TakeTimeout
from .msg import TypeRegistry, encode_value
from .system import instantiate
from .transport import PeerConfig, Transport

log = logging.getLogger(__name__)

__all__ = ["BenchmarkError", "BenchmarkReport", "PingPongHarness", "SizeResult", "run_benchmark", "size_label"]

SEND_TOPIC = "/send"
RECV_TOPIC = "/recv"


class BenchmarkError(RuntimeError):
    pass


def size_label(n: int) -> str:
    for unit, k in (("MiB", 1024 ** 2), ("KiB", 1024)):
        if n >= k and n % k == 0:
            return f"{n // k} {unit}"
    return f"{n} Byte"


def _median(xs: Sequence[float]) -> Optional[float]:
    return statistics.median(xs) if xs else None


@dataclass
class SizeResult:
    size: int
    samples_us: List[float] = field(default_factory=list)
    complete: bool = True
    node_samples_us: List[float] = field(default_factory=list)
    stale: int = 0  # late replies discarded while measuring this size
    measured: List[bool] = field(default_factory=list, repr=False)  # per exchange sent: sample or warm-up

    @property
    def median_us(self) -> Optional[float]:
        return _median(self.samples_us)

    @property
    def node_median_us(self) -> Optional[float]:
        return _median(self.node_samples_us)


def _ratio(a: Optional[float], b: Optional[float]) -> Optional[float]:
    return a / b if a is not None and b else None


@dataclass
class BenchmarkReport:
    """Results keyed by mapping label (``sw``, ``hw`` or ``mixed``), sizes in run order."""

    runs: Dict[str, List[SizeResult]] = field(default_factory=dict)
    iterations: int = 0

    @property
    def sizes(self) -> List[int]:
        first = next(iter(self.runs.values()), [])
        return [r.size for r in first]

    @property
    def complete(self) -> bool:
        return all(r.complete for rows in self.runs.values() for r in rows)

    def result(self, mapping: str, size: int) -> SizeResult:
        return next(r for r in self.runs[mapping] if r.size == size)

    @property
    def compared(self) -> bool:
        return "sw" in self.runs and "hw" in self.runs

    def speedup(self, size: int) -> Optional[float]:
        """S_round = median roundtrip with the software copy node / with the hardware one."""
        return _ratio(self.result("sw", size).median_us, self.result("hw", size).median_us)

    def node_speedup(self, size: int) -> Optional[float]:
        return _ratio(self.result("sw", size).node_median_us, self.result("hw", size).node_median_us)

    def to_json(self) -> list:
        rows = []
        for size in self.sizes:
            if self.compared:
                row = {
                    "size": size,
                    "samples_us": {m: self.result(m, size).samples_us for m in ("sw", "hw")},
                    "median_us": {m: self.result(m, size).median_us for m in ("sw", "hw")},
                    "node_median_us": {m: self.result(m, size).node_median_us for m in ("sw", "hw")},
                    "complete": all(self.result(m, size).complete for m in ("sw", "hw")),
                    "speedup": self.speedup(size),
                }
            else:
                (mapping, results), = self.runs.items()
                r = next(x for x in results if x.size == size)
                row = {"size": size, "mapping": mapping, "samples_us": r.samples_us, "median_us": r.median_us,
                       "node_median_us": r.node_median_us, "complete": r.complete}
            rows.append(row)
        return rows

    def format_table(self) -> str:
        def ms(v: Optional[float]) -> str:
            return "-" if v is None else f"{v / 1000:.2f}"

        def ratio(v: Optional[float]) -> str:
            return "-" if v is None else f"{v:.2f}"

        if self.compared:
            header = ["Message size", "t_copy-SW [ms]", "t_copy-HW [ms]", "S_copy",
                      "t_round-SW [ms]", "t_round-HW [ms]", "S_round"]
            body = []
            for size in self.sizes:
                sw, hw = self.result("sw", size), self.result("hw", size)
                mark = "" if sw.complete and hw.complete else " *"
                body.append([size_label(size) + mark, ms(sw.node_median_us), ms(hw.node_median_us),
                             ratio(self.node_speedup(size)), ms(sw.median_us), ms(hw.median_us),
                             ratio(self.speedup(size))])
        else:
            (mapping, results), = self.runs.items()
            tag = mapping.upper()
            header = ["Message size", f"t_copy-{tag} [ms]", f"t_round-{tag} [ms]", "samples"]
            body = [[size_label(r.size) + ("" if r.complete else " *"), ms(r.node_median_us),
                     ms(r.median_us), str(len(r.samples_us))] for r in results]
        widths = [max(len(row[i]) for row in [header] + body) for i in range(len(header))]
        lines = ["  ".join(c.ljust(w) if i == 0 else c.rjust(w) for i, (c, w) in enumerate(zip(row, widths)))
                 for row in [header] + body]
        lines.insert(1, "-" * len(lines[0]))
        if not self.complete:
            lines.append("* timed out; samples are partial")
        return "\n".join(lines)


class PingPongHarness:
    """The measuring node: one publisher on /send, one subscriber on /recv."""

    def __init__(self, graph: Graph, name: str = "bench_pc") -> None:
        self.graph = graph
        self.type = graph.registry.get("bench_msgs", "msg", "Payload")
        self.node = graph.create_node(name)
        self.pub = self.node.create_publisher(SEND_TOPIC, self.type)
        self.sub = self.node.create_subscriber(RECV_TOPIC, self.type)
        self.seq = 0
        self.stale = 0

    def roundtrip(self, data: bytes, timeout: float) -> Optional[float]:
        """One exchange; returns microseconds or None on timeout.

        Replies older than the current sequence number (late answers to a
        timed-out exchange) are discarded; anything else that differs from
        what was sent is an error.
        """
        self.seq = (self.seq + 1) & 0xFFFFFFFF
        sent = encode_value(self.type, {"seq": self.seq, "data": data})
        deadline = time.monotonic() + timeout
        t_start = time.perf_counter()
        self.pub.publish_serialized(sent)
        while True:
            try:
                env = self.sub.take_envelope(max(0.0, deadline - time.monotonic()))
            except TakeTimeout:
                return None
            t_end = time.perf_counter()
            if env.payload == sent:
                return (t_end - t_start) * 1e6
            got = int.from_bytes(env.payload[:4], "little")
            if got < self.seq:
                self.stale += 1
                continue
            raise BenchmarkError(f"reply {got} does not match request {self.seq}")

    def wait_ready(self, timeout: float, probe_timeout: float = 0.5) -> None:
        """Ping with an empty payload until a reply comes back."""
        deadline = time.monotonic() + timeout
        while time.monotonic() < deadline:
            if self.roundtrip(b"", probe_timeout) is not None:
                return
        raise BenchmarkError(f"no ping-pong peer answered within {timeout:g}s")


def _free_port() -> int:
    with socket.socket() as s:
        s.bind(("127.0.0.1", 0))
        return s.getsockname()[1]


BLOCK = 5
SETTLE_S = 0.5  # discarded small exchanges before the first block


def _measure(harness: PingPongHarness, sizes: Sequence[int], iterations: int, timeout: float,
             warmup: int, seed: int) -> List[SizeResult]:
    """Measure in blocks of BLOCK iterations per size, sweeping sizes up then down.

    Short blocks with alternating sweep direction spread slow shifts in machine
    load evenly over all sizes; the warm-up exchanges before each block keep a
    small message from paying for the cleanup after a large one.
    """
    rng = np.random.default_rng(seed)
    payloads = [rng.bytes(size) for size in sizes]
    results = [SizeResult(size) for size in sizes]
    settle_end = time.monotonic() + SETTLE_S
    while time.monotonic() < settle_end:
        if harness.roundtrip(b"", timeout) is None:
            break
    order = list(range(len(sizes)))
    done = 0
    while done < iterations:
        block = min(BLOCK, iterations - done)
        for i in order:
            result = results[i]
            if not result.complete:
                continue
            stale_before = harness.stale
            for _ in range(warmup):
                result.measured.append(False)
                if harness.roundtrip(payloads[i], timeout) is None:
                    break
            for _ in range(block):
                result.measured.append(True)
                t = harness.roundtrip(payloads[i], timeout)
                if t is None:
                    result.complete = False
                    log.warning("roundtrip for %s timed out after %d samples",
                                size_label(result.size), len(result.samples_us))
                    break
                result.samples_us.append(t)
            result.stale += harness.stale - stale_before
        order.reverse()
        done += block
    return results


def _attach_node_times(results: List[SizeResult], stats: Mapping[str, dict]) -> None:
    """Split per-message node times by payload size, dropping warm-up messages."""
    by_size: Dict[int, List[float]] = {}
    for entry in stats.values():
        for size, t in zip(entry.get("node_sizes", []), entry.get("node_times_us", [])):
            by_size.setdefault(size, []).append(t)
    for r in results:
        times = by_size.get(r.size, [])
        r.node_samples_us = [t for t, keep in zip(times, r.measured) if keep]


def behavior_stats(behaviors: Mapping[str, object]) -> Dict[str, dict]:
    return {name: {"node_times_us": list(getattr(b, "node_times_us", [])),
                   "node_sizes": list(getattr(b, "node_sizes", []))}
            for name, b in behaviors.items()}


def _label(config: ProjectConfig) -> str:
    maps = {t.mapping for t in config.threads}
    return maps.pop() if len(maps) == 1 else "mixed"


def _run_local(config: ProjectConfig, sizes, iterations, timeout, warmup, seed, base_dir) -> List[SizeResult]:
    local = config.with_mapping({})
    local.listen, local.peers = None, []
    system = instantiate(local, base_dir=base_dir)
    try:
        harness = PingPongHarness(system.graph)
        harness.wait_ready(timeout)
        results = _measure(harness, sizes, iterations, timeout, warmup, seed)
        if system.faults():
            raise BenchmarkError(f"node fault during benchmark: {system.faults()}")
        _attach_node_times(results, behavior_stats(system.behaviors))
        return results
    finally:
        system.stop()


def _run_two_process(config: ProjectConfig, sizes, iterations, timeout, warmup, seed, base_dir,
                     connect_timeout: float) -> List[SizeResult]:
    child = config.with_mapping({})
    if child.listen and child.peers:
        harness_addr = child.peers[0]
    else:
        child.listen = f"127.0.0.1:{_free_port()}"
        harness_addr = f"127.0.0.1:{_free_port()}"
        child.peers = [harness_addr]
    child.message_files = [os.path.abspath(os.path.join(base_dir or ".", p)) for p in child.message_files]

    registry = TypeRegistry(config.max_message_size)
    for path in child.message_files:
        with open(path, encoding="utf-8") as fh:
            registry.register_text(fh.read())
    graph = Graph(registry, name="bench_pc")

    with tempfile.TemporaryDirectory(prefix="hwros-bench-") as tmp:
        cfg_path = os.path.join(tmp, "pingpong.ini")
        stats_path = os.path.join(tmp, "stats.json")
        with open(cfg_path, "w", encoding="utf-8") as fh:
            fh.write(render_config(child))
        err_path = os.path.join(tmp, "child.log")
        with open(err_path, "wb") as err:
            proc = subprocess.Popen([sys.executable, "-m", "hwros", "run", cfg_path, "--stats", stats_path],
                                    stdout=subprocess.DEVNULL, stderr=err)
        transport = Transport(graph, PeerConfig.parse(harness_addr, child.listen)).start()
        try:
            harness = PingPongHarness(graph)
            if not transport.wait_for_subscriber(SEND_TOPIC, connect_timeout):
                raise BenchmarkError(f"copy node process did not subscribe to {SEND_TOPIC} "
                                     f"within {connect_timeout:g}s")
            harness.wait_ready(connect_timeout)
            results = _measure(harness, sizes, iterations, timeout, warmup, seed)
        finally:
            transport.close()
            if proc.poll() is None:
                proc.send_signal(signal.SIGTERM)
            try:
                code = proc.wait(timeout=15)
            except subprocess.TimeoutExpired:
                proc.kill()
                code = proc.wait()
        if code not in (0, -signal.SIGTERM):
            with open(err_path, encoding="utf-8", errors="replace") as fh:
                raise BenchmarkError(f"copy node process exited with {code}:\n{fh.read()[-2000:]}")
        if os.path.exists(stats_path):
            with open(stats_path, encoding="utf-8") as fh:
                _attach_node_times(results, json.load(fh))
    return results


def run_benchmark(config: ProjectConfig, sizes: Optional[Sequence[int]] = None, iterations: Optional[int] = None,
                  mapping: Optional[Mapping[str, str]] = None, compare: bool = False,
                  two_process: Optional[bool] = None, timeout: Optional[float] = None,
                  base_dir: Optional[str] = None, warmup: int = 2, seed: int = 0,
                  connect_timeout: float = 30.0) -> BenchmarkReport:
    """Run the ping-pong exchange for each size.

    ``compare`` runs the whole sweep twice, with every configured thread
    software-mapped and then hardware-mapped, so the report carries S_round.
    ``two_process`` defaults to whether the config has a transport section.
    """
    sizes = list(sizes if sizes is not None else config.sizes)
    iterations = iterations if iterations is not None else config.iterations
    timeout = timeout if timeout is not None else config.timeout
    if two_process is None:
        two_process = bool(config.listen)
    base = config.with_mapping(dict(mapping or {}))
    variants = [base.with_mapping({t.name: m for t in base.threads}) for m in ("sw", "hw")] if compare else [base]
    report = BenchmarkReport(iterations=iterations)
    for cfg in variants:
        if two_process:
            results = _run_two_process(cfg, sizes, iterations, timeout, warmup, seed, base_dir, connect_timeout)
        else:
            results = _run_local(cfg, sizes, iterations, timeout, warmup, seed, base_dir)
        report.runs[_label(cfg)] = results
    return report
