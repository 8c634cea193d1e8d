"""Project configuration files.

INI-like sections.  Resource groups hold ``name = kind, args...`` lines::

    [ResourceGroup@Sobel]
    node_3 = rosnode, "Sobel"
    filter_service_msg = rossrvmsg, application_msgs, srv, SobelSrv
    filter_server = rossrvs, node_3, filter_service_msg, "sobelservice", 10000

``(at)`` is accepted in place of ``@``.  The remaining sections are plain
``key = value`` settings:

``[General]``
    ``SlotCount``, ``ArenaSize``, ``MaxMessageSize``, ``MessageFile``
    (comma-separated, relative to the config file)
``[Thread@Name]``
    ``ResourceGroup``, ``Behavior``, ``Mapping`` (``sw``/``hw``), ``Slot``
``[Transport]``
    ``Listen`` (host:port), ``Peers`` (comma-separated host:port)
``[Benchmark]``
    ``Sizes`` (e.g. ``4B,8KiB,1MiB,6MiB``), ``Iterations``, ``Timeout`` (s)
"""

from __future__ import annotations

import re
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Tuple

from .arena import DEFAULT_ARENA_SIZE
from .msg import DEFAULT_MAX_MESSAGE_SIZE

__all__ = [
    "Arg",
    "ConfigError",
    "KIND_ARITY",
    "ProjectConfig",
    "ResourceDecl",
    "ResourceGroup",
    "ThreadConfig",
    "format_size",
    "parse_config",
    "parse_size",
    "render_config",
]

KIND_ARITY = {
    "rosnode": 1,
    "rosmsg": 3,
    "rossrvmsg": 3,
    "rosactmsg": 3,
    "rossub": 4,
    "rospub": 3,
    "rossrvs": 4,
    "rossrvc": 4,
    "rosacts": 4,
    "rosactc": 4,
}

MSG_KINDS = {"rosmsg": "msg", "rossrvmsg": "srv", "rosactmsg": "action"}
ENDPOINT_MSG_KIND = {
    "rossub": "rosmsg",
    "rospub": "rosmsg",
    "rossrvs": "rossrvmsg",
    "rossrvc": "rossrvmsg",
    "rosacts": "rosactmsg",
    "rosactc": "rosactmsg",
}

DEFAULT_SIZES = (4, 8 * 1024, 1024 * 1024, 6 * 1024 * 1024)


class ConfigError(ValueError):
    pass


_UNITS = {"": 1, "b": 1, "kib": 1024, "mib": 1024 ** 2, "gib": 1024 ** 3, "kb": 1000, "mb": 1000 ** 2}


def parse_size(text: str) -> int:
    m = re.fullmatch(r"\s*(\d+)\s*([A-Za-z]*)\s*", text)
    if not m or m.group(2).lower() not in _UNITS:
        raise ConfigError(f"cannot parse size {text!r}")
    return int(m.group(1)) * _UNITS[m.group(2).lower()]


def format_size(n: int) -> str:
    for unit, k in (("MiB", 1024 ** 2), ("KiB", 1024)):
        if n >= k and n % k == 0:
            return f"{n // k}{unit}"
    return f"{n}B"


@dataclass(frozen=True)
class Arg:
    value: str
    quoted: bool = False

    def render(self) -> str:
        if self.quoted:
            return '"' + self.value.replace("\\", "\\\\").replace('"', '\\"') + '"'
        return self.value


@dataclass(frozen=True)
class ResourceDecl:
    name: str
    kind: str
    args: Tuple[Arg, ...]

    @property
    def values(self) -> Tuple[str, ...]:
        return tuple(a.value for a in self.args)

    @property
    def node_ref(self) -> Optional[str]:
        return self.args[0].value if self.kind in ENDPOINT_MSG_KIND else None

    @property
    def msg_ref(self) -> Optional[str]:
        return self.args[1].value if self.kind in ENDPOINT_MSG_KIND else None

    @property
    def target(self) -> Optional[str]:
        """Topic, service or action name of an endpoint; node name of a rosnode."""
        if self.kind == "rosnode":
            return self.args[0].value
        if self.kind in ENDPOINT_MSG_KIND:
            return self.args[2].value
        return None

    @property
    def polling_us(self) -> Optional[int]:
        if KIND_ARITY[self.kind] == 4 and self.kind in ENDPOINT_MSG_KIND:
            return int(self.args[3].value)
        return None

    @property
    def message_key(self) -> Optional[Tuple[str, str, str]]:
        if self.kind in MSG_KINDS:
            return self.values
        return None

    def render(self) -> str:
        return f"{self.name} = {self.kind}, " + ", ".join(a.render() for a in self.args)


@dataclass
class ResourceGroup:
    name: str
    decls: List[ResourceDecl] = field(default_factory=list)

    def __getitem__(self, name: str) -> ResourceDecl:
        for d in self.decls:
            if d.name == name:
                return d
        raise KeyError(name)

    def of_kind(self, kind: str) -> List[ResourceDecl]:
        return [d for d in self.decls if d.kind == kind]

    @property
    def node(self) -> ResourceDecl:
        nodes = self.of_kind("rosnode")
        if len(nodes) != 1:
            raise ConfigError(f"resource group {self.name!r} declares {len(nodes)} rosnode objects")
        return nodes[0]


@dataclass
class ThreadConfig:
    name: str
    group: str
    behavior: str = ""
    mapping: str = "sw"
    slot: Optional[int] = None


@dataclass
class ProjectConfig:
    groups: List[ResourceGroup] = field(default_factory=list)
    threads: List[ThreadConfig] = field(default_factory=list)
    slot_count: Optional[int] = None
    arena_size: int = DEFAULT_ARENA_SIZE
    max_message_size: int = DEFAULT_MAX_MESSAGE_SIZE
    message_files: List[str] = field(default_factory=list)
    listen: Optional[str] = None
    peers: List[str] = field(default_factory=list)
    sizes: Tuple[int, ...] = DEFAULT_SIZES
    iterations: int = 50
    timeout: float = 10.0

    def group(self, name: str) -> ResourceGroup:
        for g in self.groups:
            if g.name == name:
                return g
        raise KeyError(f"no resource group {name!r}")

    def thread(self, name: str) -> ThreadConfig:
        for t in self.threads:
            if t.name == name or self.group(t.group).node.target == name:
                return t
        raise KeyError(f"no thread {name!r}")

    @property
    def slots(self) -> int:
        return self.slot_count if self.slot_count is not None else max(1, len(self.threads))

    def with_mapping(self, overrides: Dict[str, str]) -> "ProjectConfig":
        """Copy with thread mappings replaced; hardware threads lacking a slot get the lowest free one."""
        import copy

        cfg = copy.deepcopy(self)
        for name, mapping in overrides.items():
            if mapping not in ("sw", "hw"):
                raise ConfigError(f"mapping for {name!r} must be sw or hw, not {mapping!r}")
            try:
                cfg.thread(name).mapping = mapping
            except KeyError:
                raise ConfigError(f"--map names unknown thread {name!r}") from None
        used = {t.slot for t in cfg.threads if t.mapping == "hw" and t.slot is not None}
        for t in cfg.threads:
            if t.mapping == "hw" and t.slot is None:
                free = next(i for i in range(len(cfg.threads) + cfg.slots + 1) if i not in used)
                t.slot = free
                used.add(free)
                if cfg.slot_count is not None and free >= cfg.slot_count:
                    cfg.slot_count = free + 1
        cfg.validate()
        return cfg

    def validate(self) -> None:
        names = set()
        for g in self.groups:
            if g.name in names:
                raise ConfigError(f"duplicate resource group {g.name!r}")
            names.add(g.name)
            _check_group(g)
        thread_names = set()
        slots: Dict[int, str] = {}
        for t in self.threads:
            if t.name in thread_names:
                raise ConfigError(f"duplicate thread {t.name!r}")
            thread_names.add(t.name)
            if t.group not in names:
                raise ConfigError(f"thread {t.name!r} references unknown resource group {t.group!r}")
            self.group(t.group).node
            if t.mapping not in ("sw", "hw"):
                raise ConfigError(f"thread {t.name!r}: mapping must be sw or hw")
            if t.mapping == "hw":
                if t.slot is None:
                    raise ConfigError(f"hardware thread {t.name!r} has no slot")
                if not 0 <= t.slot < self.slots:
                    raise ConfigError(f"thread {t.name!r}: slot {t.slot} outside 0..{self.slots - 1}")
                if t.slot in slots:
                    raise ConfigError(f"slot conflict: {slots[t.slot]!r} and {t.name!r} both use slot {t.slot}")
                slots[t.slot] = t.name


def _check_group(g: ResourceGroup) -> None:
    decls = {}
    for d in g.decls:
        if d.name in decls:
            raise ConfigError(f"duplicate name {d.name!r} in resource group {g.name!r}")
        decls[d.name] = d
    for d in g.decls:
        arity = KIND_ARITY.get(d.kind)
        if arity is None:
            raise ConfigError(f"{g.name}.{d.name}: unknown kind {d.kind!r}")
        if len(d.args) != arity:
            raise ConfigError(f"{g.name}.{d.name}: {d.kind} takes {arity} arguments, got {len(d.args)}")
        if d.kind in MSG_KINDS and d.args[1].value != MSG_KINDS[d.kind]:
            raise ConfigError(f"{g.name}.{d.name}: {d.kind} expects {MSG_KINDS[d.kind]!r} as second argument")
        if d.kind in ENDPOINT_MSG_KIND:
            node = decls.get(d.node_ref)
            if node is None or node.kind != "rosnode":
                raise ConfigError(f"{g.name}.{d.name}: unresolved reference to rosnode {d.node_ref!r}")
            msg = decls.get(d.msg_ref)
            if msg is None or msg.kind != ENDPOINT_MSG_KIND[d.kind]:
                raise ConfigError(f"{g.name}.{d.name}: unresolved reference to "
                                  f"{ENDPOINT_MSG_KIND[d.kind]} {d.msg_ref!r}")
            if not d.args[2].value:
                raise ConfigError(f"{g.name}.{d.name}: empty name")
            if arity == 4:
                p = d.args[3].value
                if not p.isdigit() or int(p) <= 0:
                    raise ConfigError(f"{g.name}.{d.name}: polling period must be a positive integer, got {p!r}")
        if d.kind == "rosnode" and not d.args[0].value:
            raise ConfigError(f"{g.name}.{d.name}: empty node name")


_ARG_RE = re.compile(r'\s*(?:"((?:[^"\\]|\\.)*)"|([^,"]*?))\s*(,|$)')


def _split_args(text: str, where: str) -> List[Arg]:
    args = []
    pos = 0
    while True:
        m = _ARG_RE.match(text, pos)
        if m is None:
            raise ConfigError(f"{where}: cannot parse arguments {text!r}")
        if m.group(1) is not None:
            args.append(Arg(re.sub(r"\\(.)", r"\1", m.group(1)), True))
        else:
            args.append(Arg(m.group(2)))
        pos = m.end()
        if m.group(3) != ",":
            if pos < len(text):
                raise ConfigError(f"{where}: trailing text {text[pos:]!r}")
            return args


def _section(header: str) -> Tuple[str, Optional[str]]:
    header = header.replace("(at)", "@")
    kind, sep, name = header.partition("@")
    return kind.strip(), (name.strip() if sep else None)


def parse_config(text: str) -> ProjectConfig:
    cfg = ProjectConfig()
    section: Optional[Tuple[str, Optional[str]]] = None
    current_group: Optional[ResourceGroup] = None
    current_thread: Optional[ThreadConfig] = None
    thread_groups: Dict[str, bool] = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.strip()
        if not line or line.startswith(("#", ";")):
            continue
        where = f"line {lineno}"
        m = re.fullmatch(r"\[(.+)\]", line)
        if m:
            section = _section(m.group(1))
            current_group = current_thread = None
            kind, name = section
            if kind == "ResourceGroup":
                if not name:
                    raise ConfigError(f"{where}: resource group without a name")
                if any(g.name == name for g in cfg.groups):
                    raise ConfigError(f"{where}: duplicate resource group {name!r}")
                current_group = ResourceGroup(name)
                cfg.groups.append(current_group)
            elif kind == "Thread":
                if not name:
                    raise ConfigError(f"{where}: thread section without a name")
                current_thread = ThreadConfig(name, group="")
                cfg.threads.append(current_thread)
            elif kind not in ("General", "Transport", "Benchmark"):
                raise ConfigError(f"{where}: unknown section [{m.group(1)}]")
            continue
        if "=" not in line:
            raise ConfigError(f"{where}: expected 'name = value'")
        if section is None:
            raise ConfigError(f"{where}: setting outside any section")
        key, value = (s.strip() for s in line.split("=", 1))
        kind, _ = section
        if current_group is not None:
            head, _, rest = value.partition(",")
            dkind = head.strip()
            if dkind not in KIND_ARITY:
                raise ConfigError(f"{where}: unknown kind {dkind!r}")
            if any(d.name == key for d in current_group.decls):
                raise ConfigError(f"{where}: duplicate name {key!r} in resource group {current_group.name!r}")
            args = _split_args(rest, where) if rest.strip() else []
            current_group.decls.append(ResourceDecl(key, dkind, tuple(args)))
        elif current_thread is not None:
            _thread_setting(current_thread, key, value, where)
        else:
            _setting(cfg, kind, key, value, where)
    for t in cfg.threads:
        if not t.group:
            raise ConfigError(f"thread {t.name!r} has no ResourceGroup")
    cfg.validate()
    return cfg


def _thread_setting(t: ThreadConfig, key: str, value: str, where: str) -> None:
    k = key.lower()
    if k == "resourcegroup":
        t.group = value
    elif k == "behavior":
        t.behavior = value
    elif k == "mapping":
        t.mapping = value.lower()
    elif k == "slot":
        if not value.isdigit():
            raise ConfigError(f"{where}: slot must be a non-negative integer")
        t.slot = int(value)
    else:
        raise ConfigError(f"{where}: unknown thread setting {key!r}")


def _setting(cfg: ProjectConfig, section: str, key: str, value: str, where: str) -> None:
    k = key.lower()
    try:
        if section == "General":
            if k == "slotcount":
                cfg.slot_count = int(value)
            elif k == "arenasize":
                cfg.arena_size = parse_size(value)
            elif k == "maxmessagesize":
                cfg.max_message_size = parse_size(value)
            elif k == "messagefile":
                cfg.message_files = [v.strip() for v in value.split(",") if v.strip()]
            else:
                raise ConfigError(f"{where}: unknown setting {key!r}")
        elif section == "Transport":
            if k == "listen":
                cfg.listen = value
            elif k == "peers":
                cfg.peers = [v.strip() for v in value.split(",") if v.strip()]
            else:
                raise ConfigError(f"{where}: unknown setting {key!r}")
        elif section == "Benchmark":
            if k == "sizes":
                cfg.sizes = tuple(parse_size(v) for v in value.split(",") if v.strip())
            elif k == "iterations":
                cfg.iterations = int(value)
            elif k == "timeout":
                cfg.timeout = float(value)
            else:
                raise ConfigError(f"{where}: unknown setting {key!r}")
    except ValueError as exc:
        if isinstance(exc, ConfigError):
            raise
        raise ConfigError(f"{where}: {exc}") from exc


def render_config(cfg: ProjectConfig) -> str:
    out: List[str] = []
    general = []
    if cfg.slot_count is not None:
        general.append(f"SlotCount = {cfg.slot_count}")
    if cfg.arena_size != DEFAULT_ARENA_SIZE:
        general.append(f"ArenaSize = {format_size(cfg.arena_size)}")
    if cfg.max_message_size != DEFAULT_MAX_MESSAGE_SIZE:
        general.append(f"MaxMessageSize = {format_size(cfg.max_message_size)}")
    if cfg.message_files:
        general.append(f"MessageFile = {', '.join(cfg.message_files)}")
    if general:
        out += ["[General]", *general, ""]
    if cfg.listen or cfg.peers:
        out.append("[Transport]")
        if cfg.listen:
            out.append(f"Listen = {cfg.listen}")
        if cfg.peers:
            out.append(f"Peers = {', '.join(cfg.peers)}")
        out.append("")
    bench = []
    if tuple(cfg.sizes) != DEFAULT_SIZES:
        bench.append(f"Sizes = {','.join(format_size(s) for s in cfg.sizes)}")
    if cfg.iterations != 50:
        bench.append(f"Iterations = {cfg.iterations}")
    if cfg.timeout != 10.0:
        bench.append(f"Timeout = {cfg.timeout:g}")
    if bench:
        out += ["[Benchmark]", *bench, ""]
    for g in cfg.groups:
        out.append(f"[ResourceGroup@{g.name}]")
        out += [d.render() for d in g.decls]
        out.append("")
    for t in cfg.threads:
        out.append(f"[Thread@{t.name}]")
        out.append(f"ResourceGroup = {t.group}")
        if t.behavior:
            out.append(f"Behavior = {t.behavior}")
        out.append(f"Mapping = {t.mapping}")
        if t.slot is not None:
            out.append(f"Slot = {t.slot}")
        out.append("")
    return "\n".join(out)
