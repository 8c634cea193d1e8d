"""Build a running system from a ``ProjectConfig``.

Registers message types, creates the arena and node graph, starts the TCP
transport when peers are configured, then creates each resource group's node
and endpoints and launches its behavior under the configured mapping.
"""

from __future__ import annotations

import logging
import os
from dataclasses import dataclass, field
from typing import Callable, Dict, List, Mapping, Optional

from .api import Behavior, ResourceTable
from .arena import Arena
from .config import ConfigError, ProjectConfig, ResourceGroup
from .hwthread import HardwareRuntime, SoftwareNode, run_software_node
from .middleware import Graph, RosNode
from .msg import TypeRegistry
from .transport import PeerConfig, Transport

log = logging.getLogger(__name__)

__all__ = ["InstantiationError", "System", "build_table", "instantiate"]


class InstantiationError(ConfigError):
    pass


_MSG_VARIANTS = {
    "rosmsg": ("msg",),
    "rossrvmsg": ("srv-request", "srv-response"),
    "rosactmsg": ("action-goal", "action-feedback", "action-result"),
}


def build_table(group: ResourceGroup, graph: Graph, owner: str = "software-thread") -> ResourceTable:
    """Create the node and endpoints declared by ``group`` and index them by name."""
    reg = graph.registry
    table = ResourceTable()
    node: Optional[RosNode] = None
    types = {}
    for d in group.decls:
        if d.kind == "rosnode":
            node = graph.create_node(d.target, owner)
            table.add(d.name, "node", node)
        elif d.kind in _MSG_VARIANTS:
            pkg, _, name = d.values
            try:
                handles = tuple(reg.get(pkg, kind, name) for kind in _MSG_VARIANTS[d.kind])
            except KeyError as exc:
                raise InstantiationError(f"{group.name}.{d.name}: unknown message type {pkg}/{name}") from exc
            types[d.name] = handles
            table.add(d.name, "msg", handles)
    for d in group.decls:
        if d.kind in ("rosnode",) or d.kind in _MSG_VARIANTS:
            continue
        t = types[d.msg_ref]
        name, poll = d.target, d.polling_us
        if d.kind == "rossub":
            table.add(d.name, "sub", node.create_subscriber(name, t[0], polling_period_us=poll))
        elif d.kind == "rospub":
            table.add(d.name, "pub", node.create_publisher(name, t[0]))
        elif d.kind == "rossrvs":
            table.add(d.name, "srvs", node.create_service_server(name, t[0], t[1], poll))
        elif d.kind == "rossrvc":
            table.add(d.name, "srvc", node.create_service_client(name, t[0], t[1], poll))
        elif d.kind == "rosacts":
            table.add(d.name, "acts", node.create_action_server(name, *t, polling_period_us=poll))
        elif d.kind == "rosactc":
            table.add(d.name, "actc", node.create_action_client(name, *t, polling_period_us=poll))
    return table


@dataclass
class System:
    config: ProjectConfig
    registry: TypeRegistry
    arena: Arena
    graph: Graph
    runtime: HardwareRuntime
    transport: Optional[Transport] = None
    tables: Dict[str, ResourceTable] = field(default_factory=dict)
    behaviors: Dict[str, Behavior] = field(default_factory=dict)
    software_nodes: Dict[str, SoftwareNode] = field(default_factory=dict)
    hardware_ids: Dict[str, int] = field(default_factory=dict)
    _launch: List[Callable[[], None]] = field(default_factory=list)
    started: bool = False

    def start(self) -> "System":
        if not self.started:
            self.started = True
            for fn in self._launch:
                fn()
        return self

    def stop(self, timeout: float = 2.0) -> None:
        for node in self.software_nodes.values():
            node.stop(timeout)
        self.runtime.stop(timeout)
        if self.transport is not None:
            self.transport.close()

    def __enter__(self) -> "System":
        return self

    def __exit__(self, *exc) -> None:
        self.stop()

    def endpoint(self, group: str, name: str):
        table = self.tables[group]
        return table.entries[table.handle(name)].obj

    def thread_state(self, name: str) -> str:
        if name in self.software_nodes:
            return self.software_nodes[name].state
        return self.runtime.threads[self.hardware_ids[name]].state

    def faults(self) -> Dict[str, BaseException]:
        out = {n: s.fault for n, s in self.software_nodes.items() if s.fault is not None}
        out.update(self.runtime.faults())
        return out


def instantiate(config: ProjectConfig, behaviors: Optional[Mapping[str, Callable[[], Behavior]]] = None,
                mapping: Optional[Mapping[str, str]] = None, base_dir: Optional[str] = None,
                tracer=None, start: bool = True, registry: Optional[TypeRegistry] = None) -> System:
    """Create every group's node and endpoints and launch configured threads.

    ``behaviors`` maps behavior names to factories (default: the bundled
    ones).  ``mapping`` overrides per-thread ``sw``/``hw`` choices.
    """
    if behaviors is None:
        from .behaviors import BEHAVIORS as behaviors
    if mapping:
        config = config.with_mapping(dict(mapping))
    config.validate()
    for t in config.threads:
        if t.behavior not in behaviors:
            raise InstantiationError(f"thread {t.name!r}: unknown behavior {t.behavior!r}")

    if registry is None:
        registry = TypeRegistry(config.max_message_size)
        for path in config.message_files:
            full = os.path.join(base_dir or ".", path)
            try:
                with open(full, encoding="utf-8") as fh:
                    registry.register_text(fh.read())
            except OSError as exc:
                raise InstantiationError(f"cannot read message file {full}: {exc}") from exc
    arena = Arena(config.arena_size)
    graph = Graph(registry, arena, tracer)
    runtime = HardwareRuntime(graph, config.slots, tracer)
    system = System(config, registry, arena, graph, runtime)

    try:
        if config.listen:
            system.transport = Transport(graph, PeerConfig.parse(config.listen, ",".join(config.peers))).start()
        threads = {t.group: t for t in config.threads}
        for group in config.groups:
            t = threads.get(group.name)
            owner = "hardware-thread" if t is not None and t.mapping == "hw" else "software-thread"
            system.tables[group.name] = build_table(group, graph, owner)
        for t in config.threads:
            behavior = behaviors[t.behavior]()
            system.behaviors[t.name] = behavior
            table = system.tables[t.group]
            if t.mapping == "hw":
                def launch(t=t, behavior=behavior, table=table):
                    system.hardware_ids[t.name] = runtime.start_hardware_thread(t.name, t.slot, behavior, table)
            else:
                def launch(t=t, behavior=behavior, table=table):
                    system.software_nodes[t.name] = run_software_node(t.name, behavior, table, graph)
            system._launch.append(launch)
    except Exception:
        system.stop()
        raise
    if start:
        system.start()
    return system
