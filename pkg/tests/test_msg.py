import struct

import pytest
from hypothesis import given, settings, strategies as st

from hwros.arena import Arena, OutOfMemoryError
from hwros.msg import (
    DepthLimitError,
    DuplicateTypeError,
    FieldPathError,
    MessageFormatError,
    MessageTooLargeError,
    MessageTypeDef,
    TypeRegistry,
    alloc_message,
    decode_value,
    deserialize,
    encode_value,
    parse_definitions,
    serialize,
)


@pytest.fixture
def reg():
    return TypeRegistry()


@pytest.fixture
def image(reg):
    return reg.get("sensor_msgs", "msg", "Image")


def test_image_layout_is_24_bytes(image):
    assert image.size == 24
    assert image.offset_of("height") == 0
    assert image.offset_of("width") == 4
    assert image.offset_of("step") == 8
    assert image.offset_of("data") == 12
    assert image.offset_of("data.data") == 12
    assert image.offset_of("data.size") == 16
    assert image.offset_of("data.capacity") == 20


def test_nested_offsets_follow_request_root(reg):
    req = reg.get("application_msgs", "srv-request", "SobelSrv")
    assert req.size == 24
    assert req.offset_of("img.data.data") == 12
    assert req.offset_of("img.height") == 0


def test_empty_type_has_zero_size(reg):
    (h,) = reg.register_text("demo msg Empty { }")
    assert h.size == 0
    assert h.layout.offsets == {}
    assert encode_value(h, {}) == b""


def test_duplicate_registration_rejected(reg):
    reg.register_text("demo msg A { x: u32; }")
    with pytest.raises(DuplicateTypeError):
        reg.register_text("demo msg A { x: u32; }")


def test_unknown_path_and_path_through_scalar(image):
    with pytest.raises(FieldPathError):
        image.offset_of("nonexistent")
    with pytest.raises(FieldPathError):
        image.offset_of("height.x")


def test_scalar_alignment(reg):
    (h,) = reg.register_text("demo msg Mixed { a: u8; b: u32; c: u16; d: u8; e: f32; s: string; }")
    offs = h.layout.offsets
    assert offs["a"][0] == 0
    assert offs["b"][0] == 4
    assert offs["c"][0] == 8
    assert offs["d"][0] == 10
    assert offs["e"][0] == 12
    assert offs["s"][0] == 16
    assert h.size == 28
    field_offsets = [offs[p][0] for p in ("a", "b", "c", "d", "e", "s")]
    assert field_offsets == sorted(set(field_offsets))


def test_layout_is_deterministic():
    text = "demo msg T { a: u8; b: sequence<u16>; c: sensor_msgs/Image; }"
    a = TypeRegistry().register_text(text)[0]
    b = TypeRegistry().register_text(text)[0]
    assert a.layout == b.layout
    assert a.fingerprint == b.fingerprint


def test_depth_limit():
    reg = TypeRegistry()
    reg.register_text("d msg L0 { x: u32; }")
    for i in range(1, 8):
        reg.register_text(f"d msg L{i} {{ x: d/L{i - 1}; }}")
    with pytest.raises(DepthLimitError):
        reg.register_text("d msg L8 { x: d/L7; }")


def test_u32_encoding_is_little_endian(reg):
    h = reg.get("std_msgs", "msg", "UInt32")
    assert encode_value(h, {"data": 42}) == bytes([0x2A, 0, 0, 0])


def test_empty_sequence_encoding(reg):
    (h,) = reg.register_text("demo msg S { data: sequence<u8>; }")
    assert encode_value(h, {"data": b""}) == b"\0\0\0\0"


def test_decode_rejects_truncated_and_trailing(image):
    data = encode_value(image, {"height": 1, "width": 2, "step": 2, "data": b"ab"})
    with pytest.raises(MessageFormatError):
        decode_value(image, data[:-1])
    with pytest.raises(MessageFormatError):
        decode_value(image, data + b"\0")


def test_max_message_size_enforced():
    reg = TypeRegistry(max_message_size=64)
    h = reg.get("std_msgs", "msg", "String")
    with pytest.raises(MessageTooLargeError):
        encode_value(h, {"data": "x" * 100})
    with pytest.raises(MessageTooLargeError):
        decode_value(h, struct.pack("<I", 1000) + b"x" * 10)


def test_alloc_image_with_capacity(image):
    arena = Arena(4 * 1024 * 1024)
    m = alloc_message(arena, image, {"data": 640 * 480 * 3})
    ptr = arena.read_u32(m.root + image.offset_of("data.data"))
    assert ptr != 0
    assert arena.block_size(ptr) >= 921600
    assert arena.read_u32(m.root + image.offset_of("data.size")) == 0
    assert arena.read_u32(m.root + image.offset_of("data.capacity")) == 921600
    assert m.read() == {"height": 0, "width": 0, "step": 0, "data": b""}
    m.free()
    assert arena.used_bytes == 0


def test_alloc_zero_capacity_leaves_null_pointers(reg):
    (h,) = reg.register_text("demo msg Two { a: sequence<u8>; b: sequence<u32>; }")
    arena = Arena(1 << 16)
    m = alloc_message(arena, h)
    assert arena.read_u32(m.root + h.offset_of("a.data")) == 0
    assert arena.read_u32(m.root + h.offset_of("b.data")) == 0


def test_alloc_beyond_arena_is_out_of_memory(image):
    arena = Arena(1 << 16)
    with pytest.raises(OutOfMemoryError):
        alloc_message(arena, image, {"data": 1 << 20})
    assert arena.used_bytes == 0


def test_scalar_offsets_agree_with_serialization(reg):
    (h,) = reg.register_text("demo msg P { a: u32; b: u32; s: sequence<u8>; c: u32; }")
    arena = Arena(1 << 16)
    value = {"a": 7, "b": 0xDEADBEEF, "s": b"xyz", "c": 99}
    m = deserialize(arena, h, encode_value(h, value))
    wire = serialize(m)
    assert arena.mem_read(m.root + h.offset_of("a"), 4) == wire[0:4]
    assert arena.mem_read(m.root + h.offset_of("b"), 4) == wire[4:8]
    assert arena.mem_read(m.root + h.offset_of("c"), 4) == wire[-4:]


def test_parse_definitions_with_comments():
    defs = parse_definitions("""
    # camera frame
    demo msg Frame { stamp: u32; pixels: sequence<u8>; }  # trailing
    demo srv-request Q { n: i32; }
    """)
    assert [d.name for d in defs] == ["Frame", "Q"]
    assert isinstance(defs[0], MessageTypeDef)
    assert defs[1].kind == "srv-request"


_REG = TypeRegistry()
_REG.register_text("""
prop msg Inner { a: u16; s: string; }
prop msg Outer { x: u8; y: i32; z: f32; items: sequence<prop/Inner>; img: sensor_msgs/Image; nums: sequence<u32>; }
""")
_OUTER = _REG.get("prop", "msg", "Outer")

_inner = st.fixed_dictionaries({"a": st.integers(0, 0xFFFF), "s": st.text(max_size=20)})
_outer = st.fixed_dictionaries({
    "x": st.integers(0, 255),
    "y": st.integers(-2 ** 31, 2 ** 31 - 1),
    "z": st.floats(width=32, allow_nan=False),
    "items": st.lists(_inner, max_size=5),
    "img": st.fixed_dictionaries({
        "height": st.integers(0, 2 ** 32 - 1),
        "width": st.integers(0, 2 ** 32 - 1),
        "step": st.integers(0, 2 ** 32 - 1),
        "data": st.binary(max_size=64),
    }),
    "nums": st.lists(st.integers(0, 2 ** 32 - 1), max_size=10),
})


@settings(max_examples=200, deadline=None)
@given(_outer)
def test_round_trip_random_instances(value):
    arena = Arena(1 << 16)
    m = deserialize(arena, _OUTER, encode_value(_OUTER, value))
    back = m.read()
    assert encode_value(_OUTER, back) == encode_value(_OUTER, value)
    assert back["y"] == value["y"]
    assert [i["s"] for i in back["items"]] == [i["s"] for i in value["items"]]
    assert list(back["nums"]) == value["nums"]
    m.free()
    assert arena.used_bytes == 0


@settings(max_examples=100, deadline=None)
@given(st.integers(0, 2 ** 32 - 1), st.integers(0, 2 ** 32 - 1), st.binary(max_size=300))
def test_random_image_round_trip(h, w, data):
    reg = TypeRegistry()
    image = reg.get("sensor_msgs", "msg", "Image")
    arena = Arena(1 << 16)
    value = {"height": h, "width": w, "step": w, "data": data}
    m = deserialize(arena, image, encode_value(image, value))
    assert m.read() == value
