"""Message schemas, their in-arena layout, and the wire encoding.

A registered type has two representations:

* an inline struct inside the arena, C-like: every scalar aligned to its
  size, every sequence a 12 byte header ``(address, size, capacity)`` whose
  payload lives in a separate arena block.  Hardware threads do pointer
  arithmetic on this layout (``offset_of``), so it must be deterministic.
* a flat little-endian byte string used by the transport: fields in
  declaration order, depth first, no padding, sequences as a ``u32`` count
  followed by the elements.

Python-side values are plain data: ints/floats for scalars, ``bytes`` for
``sequence<u8>``, ``str`` for ``string``, lists for other sequences and dicts
for nested messages.
"""

from __future__ import annotations

import hashlib
import re
import struct
import threading
from dataclasses import dataclass, field
from typing import Any, Dict, Iterable, List, Mapping, Optional, Tuple, Union

__all__ = [
    "BUILTIN_DEFINITIONS",
    "DEFAULT_MAX_MESSAGE_SIZE",
    "DepthLimitError",
    "DuplicateTypeError",
    "FieldPathError",
    "KINDS",
    "MAX_DEPTH",
    "MessageFormatError",
    "MessageInstance",
    "MessageLayout",
    "MessageTooLargeError",
    "MessageTypeDef",
    "Nested",
    "Scalar",
    "Sequence",
    "TypeHandle",
    "TypeRegistry",
    "alloc_message",
    "deserialize",
    "parse_definitions",
    "parse_field_type",
    "serialize",
]

MAX_DEPTH = 8
DEFAULT_MAX_MESSAGE_SIZE = 8 * 1024 * 1024
SEQUENCE_HEADER_SIZE = 12

KINDS = (
    "msg",
    "srv-request",
    "srv-response",
    "action-goal",
    "action-feedback",
    "action-result",
)

_SCALARS = {
    "u8": ("B", 1),
    "u16": ("H", 2),
    "u32": ("I", 4),
    "i32": ("i", 4),
    "f32": ("f", 4),
}


class MessageError(Exception):
    """Base class for message-model failures."""


class DuplicateTypeError(MessageError):
    pass


class DepthLimitError(MessageError):
    pass


class FieldPathError(MessageError, KeyError):
    def __str__(self) -> str:
        return str(self.args[0]) if self.args else ""


class MessageFormatError(MessageError, ValueError):
    """Malformed or truncated wire bytes, or a value that does not fit its type."""


class MessageTooLargeError(MessageError):
    pass


# -- field types ------------------------------------------------------------


@dataclass(frozen=True)
class Scalar:
    name: str

    def __post_init__(self) -> None:
        if self.name not in _SCALARS:
            raise ValueError(f"unknown scalar type {self.name!r}")

    @property
    def fmt(self) -> str:
        return _SCALARS[self.name][0]

    @property
    def size(self) -> int:
        return _SCALARS[self.name][1]

    def text(self) -> str:
        return self.name


@dataclass(frozen=True)
class Sequence:
    element: "FieldType"
    is_string: bool = False

    def text(self) -> str:
        if self.is_string:
            return "string"
        return f"sequence<{self.element.text()}>"


@dataclass(frozen=True)
class Nested:
    """Reference to a registered ``msg`` type, written ``group/Name``."""

    ref: str

    def text(self) -> str:
        return self.ref


FieldType = Union[Scalar, Sequence, Nested]

U8 = Scalar("u8")
STRING = Sequence(U8, is_string=True)


def parse_field_type(text: str, default_group: Optional[str] = None) -> FieldType:
    text = text.strip()
    if text in _SCALARS:
        return Scalar(text)
    if text == "string":
        return STRING
    m = re.fullmatch(r"sequence\s*<(.*)>", text)
    if m:
        return Sequence(parse_field_type(m.group(1), default_group))
    if re.fullmatch(r"[A-Za-z_]\w*/[A-Za-z_]\w*", text):
        return Nested(text)
    if re.fullmatch(r"[A-Za-z_]\w*", text):
        if default_group is None:
            raise MessageFormatError(f"unqualified type reference {text!r}")
        return Nested(f"{default_group}/{text}")
    raise MessageFormatError(f"cannot parse field type {text!r}")


@dataclass(frozen=True)
class MessageTypeDef:
    group: str
    kind: str
    name: str
    fields: Tuple[Tuple[str, FieldType], ...] = ()

    def __post_init__(self) -> None:
        object.__setattr__(self, "fields", tuple((n, t) for n, t in self.fields))
        if self.kind not in KINDS:
            raise MessageFormatError(f"unknown message kind {self.kind!r}")
        for ident in (self.group, self.name):
            if not re.fullmatch(r"[A-Za-z_]\w*", ident):
                raise MessageFormatError(f"invalid identifier {ident!r}")
        seen = set()
        for fname, _ in self.fields:
            if not re.fullmatch(r"[A-Za-z_]\w*", fname):
                raise MessageFormatError(f"invalid field name {fname!r}")
            if fname in seen:
                raise MessageFormatError(f"duplicate field {fname!r} in {self.key}")
            seen.add(fname)

    @property
    def key(self) -> Tuple[str, str, str]:
        return (self.group, self.kind, self.name)

    def text(self) -> str:
        body = " ".join(f"{n}: {t.text()};" for n, t in self.fields)
        return f"{self.group} {self.kind} {self.name} {{ {body} }}" if body else (
            f"{self.group} {self.kind} {self.name} {{ }}"
        )


_DEF_RE = re.compile(r"([A-Za-z_]\w*)\s+([\w-]+)\s+([A-Za-z_]\w*)\s*\{([^}]*)\}", re.S)


def parse_definitions(text: str) -> List[MessageTypeDef]:
    """Parse ``group kind TypeName { name: type; ... }`` blocks.

    ``#`` starts a comment.  Unqualified nested references resolve to the
    defining block's group.
    """
    text = re.sub(r"#[^\n]*", "", text)
    defs = []
    pos = 0
    for m in _DEF_RE.finditer(text):
        if text[pos:m.start()].strip():
            raise MessageFormatError(f"unexpected text {text[pos:m.start()].strip()!r}")
        pos = m.end()
        group, kind, name, body = m.groups()
        fields = []
        for stmt in body.split(";"):
            stmt = stmt.strip()
            if not stmt:
                continue
            if ":" not in stmt:
                raise MessageFormatError(f"bad field declaration {stmt!r}")
            fname, ftype = stmt.split(":", 1)
            fields.append((fname.strip(), parse_field_type(ftype, group)))
        defs.append(MessageTypeDef(group, kind, name, tuple(fields)))
    if text[pos:].strip():
        raise MessageFormatError(f"unexpected text {text[pos:].strip()!r}")
    return defs


# -- compiled codecs --------------------------------------------------------
#
# Each codec knows its inline size/alignment and four transformations:
# arena inline bytes <-> value, value <-> wire bytes.


def _align_up(n: int, a: int) -> int:
    return (n + a - 1) // a * a


class _ScalarCodec:
    def __init__(self, scalar: Scalar) -> None:
        self.scalar = scalar
        self.size = scalar.size
        self.align = scalar.size
        self.depth = 0
        self._st = struct.Struct("<" + scalar.fmt)

    def zero(self) -> Any:
        return 0.0 if self.scalar.name == "f32" else 0

    def check(self, value: Any) -> Any:
        try:
            return self._st.unpack(self._st.pack(value))[0]
        except (struct.error, TypeError) as exc:
            raise MessageFormatError(f"{value!r} does not fit {self.scalar.name}") from exc

    def read_inline(self, mem, buf: bytes, off: int) -> Any:
        return self._st.unpack_from(buf, off)[0]

    def write_inline(self, mem, buf: bytearray, off: int, value: Any, blocks: list) -> None:
        try:
            self._st.pack_into(buf, off, value)
        except (struct.error, TypeError) as exc:
            raise MessageFormatError(f"{value!r} does not fit {self.scalar.name}") from exc

    def encode(self, value: Any, out: list) -> None:
        try:
            out.append(self._st.pack(value))
        except (struct.error, TypeError) as exc:
            raise MessageFormatError(f"{value!r} does not fit {self.scalar.name}") from exc

    def decode(self, data: memoryview, pos: int, limit: int) -> Tuple[Any, int]:
        end = pos + self.size
        if end > len(data):
            raise MessageFormatError("truncated input")
        return self._st.unpack_from(data, pos)[0], end


class _SequenceCodec:
    size = SEQUENCE_HEADER_SIZE
    align = 4

    def __init__(self, seq: Sequence, element) -> None:
        self.seq = seq
        self.element = element
        self.stride = _align_up(element.size, element.align) if element.size else 0
        self.depth = 1 + element.depth
        self.bulk = isinstance(element, _ScalarCodec)
        self.raw = self.bulk and element.scalar.name == "u8"

    def zero(self) -> Any:
        if self.seq.is_string:
            return ""
        return b"" if self.raw else []

    def _as_raw(self, value: Any) -> bytes:
        if self.seq.is_string:
            if not isinstance(value, str):
                raise MessageFormatError(f"string field expects str, got {type(value).__name__}")
            return value.encode("utf-8", "surrogateescape")
        if isinstance(value, (bytes, bytearray, memoryview)):
            return bytes(value)
        try:
            return bytes(value)
        except (TypeError, ValueError) as exc:
            raise MessageFormatError("u8 sequence expects bytes") from exc

    def _from_raw(self, raw: bytes) -> Any:
        if self.seq.is_string:
            return raw.decode("utf-8", "surrogateescape")
        return raw

    def _pack_elements(self, mem, value: Any, blocks: list) -> Tuple[bytes, int]:
        """Return (payload bytes in arena layout, element count)."""
        if self.raw:
            raw = self._as_raw(value)
            return raw, len(raw)
        items = list(value)
        n = len(items)
        if self.bulk:
            fmt = "<%d%s" % (n, self.element.scalar.fmt)
            try:
                return struct.pack(fmt, *items), n
            except struct.error as exc:
                raise MessageFormatError(str(exc)) from exc
        buf = bytearray(self.stride * n)
        for i, item in enumerate(items):
            self.element.write_inline(mem, buf, i * self.stride, item, blocks)
        return bytes(buf), n

    def read_inline(self, mem, buf: bytes, off: int) -> Any:
        addr, size, cap = struct.unpack_from("<III", buf, off)
        if size > cap:
            raise MessageFormatError(f"sequence size {size} exceeds capacity {cap}")
        if size == 0 or self.stride == 0:
            if size and self.stride == 0:
                return [self.element.zero() for _ in range(size)]
            return self.zero()
        if addr == 0:
            raise MessageFormatError("non-empty sequence with null address")
        payload = mem.mem_read(addr, size * self.stride)
        if self.raw:
            return self._from_raw(payload)
        if self.bulk:
            return list(struct.unpack("<%d%s" % (size, self.element.scalar.fmt), payload))
        return [self.element.read_inline(mem, payload, i * self.stride) for i in range(size)]

    def write_inline(self, mem, buf: bytearray, off: int, value: Any, blocks: list) -> None:
        payload, n = self._pack_elements(mem, value, blocks)
        addr = 0
        if n and self.stride:
            addr = mem.alloc(len(payload))
            blocks.append(addr)
            mem.mem_write(addr, payload)
        struct.pack_into("<III", buf, off, addr, n, n)

    def write_empty(self, mem, buf: bytearray, off: int, capacity: int, blocks: list) -> None:
        addr = 0
        if capacity and self.stride:
            addr = mem.alloc(capacity * self.stride)
            blocks.append(addr)
        struct.pack_into("<III", buf, off, addr, 0, capacity)

    def encode(self, value: Any, out: list) -> None:
        if self.raw:
            raw = self._as_raw(value)
            out.append(struct.pack("<I", len(raw)))
            out.append(raw)
            return
        items = list(value)
        out.append(struct.pack("<I", len(items)))
        if self.bulk:
            try:
                out.append(struct.pack("<%d%s" % (len(items), self.element.scalar.fmt), *items))
            except struct.error as exc:
                raise MessageFormatError(str(exc)) from exc
            return
        for item in items:
            self.element.encode(item, out)

    def decode(self, data: memoryview, pos: int, limit: int) -> Tuple[Any, int]:
        if pos + 4 > len(data):
            raise MessageFormatError("truncated input")
        (n,) = struct.unpack_from("<I", data, pos)
        pos += 4
        if n * max(self.stride, 1) > limit:
            raise MessageTooLargeError(f"sequence of {n} elements exceeds max message size {limit}")
        if self.bulk:
            end = pos + n * self.element.size
            if end > len(data):
                raise MessageFormatError("truncated input")
            if self.raw:
                return self._from_raw(bytes(data[pos:end])), end
            return list(struct.unpack_from("<%d%s" % (n, self.element.scalar.fmt), data, pos)), end
        items = []
        for _ in range(n):
            item, pos = self.element.decode(data, pos, limit)
            items.append(item)
        return items, pos


class _StructCodec:
    def __init__(self, fields: List[Tuple[str, int, Any]], size: int, align: int, depth: int) -> None:
        self.fields = fields
        self.size = size
        self.align = align
        self.depth = depth

    def zero(self) -> Dict[str, Any]:
        return {name: c.zero() for name, _, c in self.fields}

    def read_inline(self, mem, buf: bytes, off: int) -> Dict[str, Any]:
        return {name: c.read_inline(mem, buf, off + o) for name, o, c in self.fields}

    def write_inline(self, mem, buf: bytearray, off: int, value: Mapping[str, Any], blocks: list) -> None:
        if not isinstance(value, Mapping):
            raise MessageFormatError(f"nested message expects a mapping, got {type(value).__name__}")
        unknown = set(value) - {name for name, _, _ in self.fields}
        if unknown:
            raise MessageFormatError(f"unknown fields {sorted(unknown)}")
        for name, o, c in self.fields:
            c.write_inline(mem, buf, off + o, value.get(name, c.zero()), blocks)

    def encode(self, value: Mapping[str, Any], out: list) -> None:
        if not isinstance(value, Mapping):
            raise MessageFormatError(f"nested message expects a mapping, got {type(value).__name__}")
        unknown = set(value) - {name for name, _, _ in self.fields}
        if unknown:
            raise MessageFormatError(f"unknown fields {sorted(unknown)}")
        for name, _, c in self.fields:
            c.encode(value.get(name, c.zero()), out)

    def decode(self, data: memoryview, pos: int, limit: int) -> Tuple[Dict[str, Any], int]:
        value = {}
        for name, _, c in self.fields:
            value[name], pos = c.decode(data, pos, limit)
        return value, pos


@dataclass(frozen=True)
class MessageLayout:
    total_size: int
    alignment: int
    offsets: Dict[str, Tuple[int, str]]

    def field_offsets(self) -> List[Tuple[str, int, str]]:
        return sorted(((p, o, k) for p, (o, k) in self.offsets.items()), key=lambda t: (t[1], t[0]))


@dataclass(frozen=True, eq=False)
class TypeHandle:
    definition: MessageTypeDef
    layout: MessageLayout
    fingerprint: bytes
    canonical: str
    codec: _StructCodec = field(repr=False)
    registry: "TypeRegistry" = field(repr=False)

    @property
    def key(self) -> Tuple[str, str, str]:
        return self.definition.key

    @property
    def name(self) -> str:
        g, k, n = self.key
        return f"{g}/{k}/{n}"

    @property
    def size(self) -> int:
        return self.layout.total_size

    def offset_of(self, path: str) -> int:
        return offset_of(self, path)

    def zero(self) -> Dict[str, Any]:
        return self.codec.zero()


class TypeRegistry:
    """Write-once registry of message types.

    Registration order matters only for nested references, which must point
    at an already registered ``msg`` type.
    """

    def __init__(self, max_message_size: int = DEFAULT_MAX_MESSAGE_SIZE, builtins: bool = True) -> None:
        self.max_message_size = max_message_size
        self._types: Dict[Tuple[str, str, str], TypeHandle] = {}
        self._lock = threading.Lock()
        if builtins:
            self.register_text(BUILTIN_DEFINITIONS)

    def __contains__(self, key) -> bool:
        return tuple(key) in self._types

    def __iter__(self):
        return iter(list(self._types.values()))

    def __len__(self) -> int:
        return len(self._types)

    def get(self, group: str, kind: str, name: str) -> TypeHandle:
        try:
            return self._types[(group, kind, name)]
        except KeyError:
            raise KeyError(f"message type {group}/{kind}/{name} is not registered") from None

    def lookup(self, ref: str, kind: str = "msg") -> TypeHandle:
        group, name = ref.split("/")
        return self.get(group, kind, name)

    def register(self, definition: MessageTypeDef) -> TypeHandle:
        with self._lock:
            if definition.key in self._types:
                raise DuplicateTypeError(f"{'/'.join(definition.key)} already registered")
            handle = self._compile(definition)
            self._types[definition.key] = handle
            return handle

    def register_text(self, text: str) -> List[TypeHandle]:
        return [self.register(d) for d in parse_definitions(text)]

    def _resolve(self, ref: str) -> TypeHandle:
        try:
            return self.lookup(ref)
        except (KeyError, ValueError):
            raise MessageFormatError(f"nested type {ref!r} is not a registered msg type") from None

    def _field_codec(self, ftype: FieldType):
        if isinstance(ftype, Scalar):
            return _ScalarCodec(ftype), ftype.text()
        if isinstance(ftype, Sequence):
            elem, elem_canon = self._field_codec(ftype.element)
            canon = "string" if ftype.is_string else f"sequence<{elem_canon}>"
            return _SequenceCodec(ftype, elem), canon
        target = self._resolve(ftype.ref)
        return target.codec, "{" + target.canonical + "}"

    def _compile(self, definition: MessageTypeDef) -> TypeHandle:
        fields = []
        offsets: Dict[str, Tuple[int, str]] = {}
        offset = 0
        align = 1
        depth = 0
        canon_parts = []
        for fname, ftype in definition.fields:
            codec, canon = self._field_codec(ftype)
            offset = _align_up(offset, codec.align)
            fields.append((fname, offset, codec))
            _collect_offsets(offsets, fname, offset, codec)
            offset += codec.size
            align = max(align, codec.align)
            depth = max(depth, codec.depth)
            canon_parts.append(f"{fname}:{canon}")
        depth += 1
        if depth > MAX_DEPTH:
            raise DepthLimitError(f"{'/'.join(definition.key)} nests {depth} levels (limit {MAX_DEPTH})")
        size = _align_up(offset, align)
        codec = _StructCodec(fields, size, align, depth)
        canonical = ";".join(canon_parts)
        full = f"{definition.group}/{definition.kind}/{definition.name}:{canonical}"
        fp = hashlib.sha256(full.encode()).digest()[:8]
        layout = MessageLayout(size, align, offsets)
        return TypeHandle(definition, layout, fp, canonical, codec, self)


def _collect_offsets(table: Dict[str, Tuple[int, str]], path: str, offset: int, codec) -> None:
    if isinstance(codec, _ScalarCodec):
        table[path] = (offset, codec.scalar.name)
    elif isinstance(codec, _SequenceCodec):
        table[path] = (offset, "sequence")
        table[path + ".data"] = (offset, "address")
        table[path + ".size"] = (offset + 4, "u32")
        table[path + ".capacity"] = (offset + 8, "u32")
    else:
        table[path] = (offset, "struct")
        for name, o, c in codec.fields:
            _collect_offsets(table, f"{path}.{name}", offset + o, c)


def offset_of(handle: TypeHandle, path: str) -> int:
    """Inline byte offset of ``path`` relative to the message root.

    For a sequence, ``seq.data`` (and ``seq`` itself) name the 4-byte address
    word, ``seq.size`` and ``seq.capacity`` the two counters after it.
    """
    table = handle.layout.offsets
    if path in table:
        return table[path][0]
    parts = path.split(".")
    for i in range(1, len(parts)):
        prefix = ".".join(parts[:i])
        entry = table.get(prefix)
        if entry is not None and entry[1] not in ("struct", "sequence"):
            raise FieldPathError(f"path {path!r} goes through scalar field {prefix!r}")
    raise FieldPathError(f"unknown field {path!r} in {handle.name}")


# -- instances --------------------------------------------------------------


@dataclass
class MessageInstance:
    handle: TypeHandle
    arena: Any
    root: int
    blocks: List[int] = field(default_factory=list)

    def read(self) -> Dict[str, Any]:
        return read_value(self.arena, self.handle, self.root)

    def free(self) -> None:
        for addr in reversed(self.blocks):
            self.arena.free(addr)
        self.blocks = []

    def address_of(self, path: str) -> int:
        return self.root + offset_of(self.handle, path)


def _root_size(handle: TypeHandle) -> int:
    return max(_align_up(handle.size, 4), 4)


def alloc_message(arena, handle: TypeHandle, capacities: Optional[Mapping[str, int]] = None) -> MessageInstance:
    """Allocate a zeroed instance; sequences get empty payload blocks of the requested capacity.

    ``capacities`` maps dotted sequence paths (``"data"``, ``"img.data"``) to
    element counts.  Sequences nested inside sequence elements cannot be
    preallocated this way.
    """
    capacities = dict(capacities or {})
    for path in capacities:
        entry = handle.layout.offsets.get(path)
        if entry is None or entry[1] != "sequence":
            raise FieldPathError(f"{path!r} is not a sequence field of {handle.name}")
    blocks: List[int] = []
    try:
        root = arena.alloc(_root_size(handle))
        blocks.append(root)
        buf = bytearray(handle.size)
        _init_struct(arena, handle.codec, buf, 0, "", capacities, blocks)
        if handle.size:
            arena.mem_write(root, bytes(buf))
    except BaseException:
        for addr in reversed(blocks):
            arena.free(addr)
        raise
    return MessageInstance(handle, arena, root, blocks)


def _init_struct(arena, codec: _StructCodec, buf, off, prefix, capacities, blocks) -> None:
    for name, o, c in codec.fields:
        path = prefix + name
        if isinstance(c, _SequenceCodec):
            c.write_empty(arena, buf, off + o, int(capacities.get(path, 0)), blocks)
        elif isinstance(c, _StructCodec):
            _init_struct(arena, c, buf, off + o, path + ".", capacities, blocks)


def write_value(arena, handle: TypeHandle, value: Mapping[str, Any]) -> MessageInstance:
    """Materialize ``value`` into fresh arena blocks (sizes equal capacities)."""
    blocks: List[int] = []
    try:
        root = arena.alloc(_root_size(handle))
        blocks.append(root)
        buf = bytearray(handle.size)
        handle.codec.write_inline(arena, buf, 0, value, blocks)
        if handle.size:
            arena.mem_write(root, bytes(buf))
    except BaseException:
        for addr in reversed(blocks):
            arena.free(addr)
        raise
    return MessageInstance(handle, arena, root, blocks)


def read_value(arena, handle: TypeHandle, root: int) -> Dict[str, Any]:
    if not handle.size:
        return {}
    buf = arena.mem_read(root, handle.size)
    return handle.codec.read_inline(arena, buf, 0)


def encode_value(handle: TypeHandle, value: Mapping[str, Any]) -> bytes:
    out: list = []
    handle.codec.encode(value, out)
    data = b"".join(out)
    if len(data) > handle.registry.max_message_size:
        raise MessageTooLargeError(f"{len(data)} bytes exceeds max message size")
    return data


def decode_value(handle: TypeHandle, data: bytes) -> Dict[str, Any]:
    limit = handle.registry.max_message_size
    if len(data) > limit:
        raise MessageTooLargeError(f"{len(data)} bytes exceeds max message size {limit}")
    view = memoryview(data)
    value, pos = handle.codec.decode(view, 0, limit)
    if pos != len(view):
        raise MessageFormatError(f"{len(view) - pos} trailing bytes")
    return value


def serialize(instance: MessageInstance) -> bytes:
    return encode_value(instance.handle, instance.read())


def serialize_at(arena, handle: TypeHandle, root: int) -> bytes:
    return encode_value(handle, read_value(arena, handle, root))


def deserialize(arena, handle: TypeHandle, data: bytes) -> MessageInstance:
    return write_value(arena, handle, decode_value(handle, data))


BUILTIN_DEFINITIONS = """
std_msgs msg UInt32 { data: u32; }
std_msgs msg String { data: string; }
sensor_msgs msg Image { height: u32; width: u32; step: u32; data: sequence<u8>; }
application_msgs srv-request SobelSrv { img: sensor_msgs/Image; }
application_msgs srv-response SobelSrv { img: sensor_msgs/Image; }
application_msgs msg SortData { data: sequence<u32>; }
bench_msgs msg Payload { seq: u32; data: sequence<u8>; }
action_msgs msg GoalRef { id_lo: u32; id_hi: u32; }
action_msgs msg GoalAck { id_lo: u32; id_hi: u32; accepted: u32; }
"""
