"""Helpers shared by the test modules."""

from __future__ import annotations

from typing import Callable, Dict, List, Sequence, Tuple

import numpy as np

from hwros.api import Op
from hwros.config import parse_config
from hwros.system import instantiate
from hwros.workloads import pack_angles

TAKE_STEPS = ("command", "dispatch", "store", "unblock", "response", "memif_read")


def take_order_violations(events: List[dict], thread_id: int, root_size: int) -> Tuple[int, List[str]]:
    """Check every SUBSCRIBER_TAKE of one hardware thread against the six-step order.

    Returns (number of takes checked, list of violations).  The store is
    attributed to the thread by the delegate's execution context.
    """
    delegate_ctx = f"delegate-{thread_id}"
    mine = [e for e in events if e.get("thread") == thread_id
            or (e["kind"] == "store" and e.get("context") == delegate_ctx)]
    problems = []
    checked = 0
    i = 0
    while i < len(mine):
        e = mine[i]
        if e["kind"] == "command" and e["opcode"] == Op.SUBSCRIBER_TAKE:
            window = mine[i:i + 6]
            kinds = tuple(x["kind"] for x in window)
            if kinds != TAKE_STEPS:
                problems.append(f"take at seq {e['seq']}: got {kinds}")
            else:
                addr = window[4].get("address")
                read = window[5]
                if window[4]["status"] != 0:
                    problems.append(f"take at seq {e['seq']}: status {window[4]['status']}")
                elif window[2]["address"] != addr:
                    problems.append(f"take at seq {e['seq']}: stored {window[2]['address']:#x}, answered {addr:#x}")
                elif not addr <= read["address"] < addr + root_size:
                    problems.append(f"take at seq {e['seq']}: first read {read['address']:#x} outside message")
                seqs = [x["seq"] for x in window]
                if seqs != sorted(seqs):
                    problems.append(f"take at seq {e['seq']}: sequence numbers out of order")
            checked += 1
            i += 6
        else:
            i += 1
    return checked, problems


PIPE_CONFIG = """\
[General]
SlotCount = 1
ArenaSize = 32MiB

[ResourceGroup@Work]
node = rosnode, "worker"
msg = rosmsg, {pkg}, msg, {name}
sub = rossub, node, msg, "/in", 1000
pub = rospub, node, msg, "/out"

[Thread@worker]
ResourceGroup = Work
Behavior = {behavior}
Mapping = sw
Slot = 0
"""

WORKLOAD_TYPES = {
    "copy": ("bench_msgs", "Payload"),
    "sobel": ("sensor_msgs", "Image"),
    "sort": ("application_msgs", "SortData"),
    "inverse_kinematics": ("std_msgs", "UInt32"),
}


def random_inputs(workload: str, n: int, seed: int = 0) -> List[dict]:
    rng = np.random.default_rng(seed)
    out = []
    for i in range(n):
        if workload == "copy":
            size = int(rng.choice([0, 1, 4, 100, 8192, 70000]))
            out.append({"seq": i, "data": rng.bytes(size)})
        elif workload == "sobel":
            img = rng.integers(0, 256, (480, 640, 3), dtype=np.uint8)
            out.append({"height": 480, "width": 640, "step": 1920, "data": img.tobytes()})
        elif workload == "sort":
            out.append({"data": rng.integers(0, 2 ** 32, 2048, dtype=np.uint64).tolist()})
        elif workload == "inverse_kinematics":
            ax, ay = (int(v) for v in rng.integers(-45 * 64, 45 * 64 + 1, 2))
            out.append({"data": pack_angles(ax, ay)})
    return out


def run_pipeline(workload: str, mapping: str, inputs: Sequence[dict], tracer=None,
                 timeout: float = 20.0) -> Tuple[List[bytes], object]:
    """Feed ``inputs`` one at a time through a single-node pipeline; return output payloads."""
    pkg, name = WORKLOAD_TYPES[workload]
    cfg = parse_config(PIPE_CONFIG.format(pkg=pkg, name=name, behavior=workload))
    system = instantiate(cfg, mapping={"worker": mapping}, tracer=tracer)
    try:
        t = system.registry.get(pkg, "msg", name)
        harness = system.graph.create_node("harness")
        pub = harness.create_publisher("/in", t)
        sub = harness.create_subscriber("/out", t)
        outputs = []
        for value in inputs:
            pub.publish_value(value)
            outputs.append(sub.take_envelope(timeout).payload)
        faults = system.faults()
        return outputs, system if not faults else faults
    finally:
        system.stop()
