import random
import threading

import pytest
from hypothesis import given, settings, strategies as st

from hwros.arena import (
    NULL_GUARD,
    AlignmentError,
    Arena,
    BoundsError,
    OutOfMemoryError,
    UnknownAddressError,
)


def test_size_must_be_power_of_two():
    with pytest.raises(ValueError):
        Arena(1000)
    assert Arena(1024).size == 1024


def test_default_size_is_64_mib():
    assert Arena().size == 64 * 1024 * 1024


def test_alloc_is_aligned_zeroed_and_above_null_guard():
    a = Arena(1 << 12)
    p = a.alloc(5)
    assert p >= NULL_GUARD and p % 4 == 0
    a.mem_write(p, b"\xff" * 8)
    a.free(p)
    q = a.alloc(8)
    assert a.mem_read(q, 8) == bytes(8)


def test_word_round_trip_and_errors():
    a = Arena(1 << 12)
    p = a.alloc(16)
    a.write_u32(p + 4, 0xCAFEBABE)
    assert a.read_u32(p + 4) == 0xCAFEBABE
    assert a.mem_read(p + 4, 4) == bytes.fromhex("bebafeca")
    with pytest.raises(AlignmentError):
        a.mem_read(p + 2, 4)
    with pytest.raises(BoundsError):
        a.mem_read(p, 0)
    with pytest.raises(BoundsError):
        a.mem_read(0, 4)
    with pytest.raises(BoundsError):
        a.mem_write(a.size - 4, b"12345678")


def test_double_free_and_unknown_free():
    a = Arena(1 << 12)
    p = a.alloc(4)
    a.free(p)
    with pytest.raises(UnknownAddressError):
        a.free(p)
    with pytest.raises(UnknownAddressError):
        a.free(p + 4)


def test_out_of_memory():
    a = Arena(1 << 10)
    with pytest.raises(OutOfMemoryError):
        a.alloc(1 << 10)
    a.alloc((1 << 10) - NULL_GUARD)
    with pytest.raises(OutOfMemoryError):
        a.alloc(4)


def test_coalescing_restores_one_block():
    a = Arena(1 << 12)
    ps = [a.alloc(100) for _ in range(10)]
    for p in ps[::2] + ps[1::2]:
        a.free(p)
    assert a.free_bytes == a.size - NULL_GUARD
    assert a.alloc(a.size - NULL_GUARD) == NULL_GUARD


@settings(max_examples=60, deadline=None)
@given(st.lists(st.tuples(st.booleans(), st.integers(1, 600), st.integers(0, 10 ** 6)), max_size=120))
def test_alloc_free_against_interval_oracle(ops):
    """Live blocks never overlap, stay inside the arena and keep their contents."""
    a = Arena(1 << 14)
    live = {}
    for is_alloc, length, pick in ops:
        if is_alloc or not live:
            need = (length + 3) // 4 * 4
            spans = sorted((q, q + (n + 3) // 4 * 4) for q, (n, _) in live.items())
            edges = [NULL_GUARD] + [x for s in spans for x in s] + [a.size]
            largest_gap = max(edges[i + 1] - edges[i] for i in range(0, len(edges), 2))
            try:
                p = a.alloc(length)
            except OutOfMemoryError:
                assert largest_gap < need
                continue
            assert largest_gap >= need
            stamp = bytes([(p >> 2) & 0xFF]) * length
            a.mem_write(p, stamp)
            live[p] = (length, stamp)
        else:
            p = sorted(live)[pick % len(live)]
            del live[p]
            a.free(p)
        spans = sorted((p, p + (n + 3) // 4 * 4) for p, (n, _) in live.items())
        for (s0, e0), (s1, _) in zip(spans, spans[1:]):
            assert e0 <= s1
        for s, e in spans:
            assert NULL_GUARD <= s and e <= a.size
        assert a.used_bytes == sum(e - s for s, e in spans)
        assert a.used_bytes + a.free_bytes == a.size - NULL_GUARD
    for p, (n, stamp) in live.items():
        assert a.mem_read(p, n) == stamp


def test_concurrent_transactions_are_atomic():
    a = Arena(1 << 16)
    p = a.alloc(1024)
    errors = []

    def writer(byte):
        pattern = bytes([byte]) * 1024
        for _ in range(300):
            a.mem_write(p, pattern)

    def reader():
        for _ in range(600):
            data = a.mem_read(p, 1024)
            if len(set(data)) != 1:
                errors.append(data[:8])

    threads = [threading.Thread(target=writer, args=(b,)) for b in (1, 2)] + [threading.Thread(target=reader)]
    for t in threads:
        t.start()
    for t in threads:
        t.join()
    assert errors == []


def test_transaction_hook_sees_every_access():
    a = Arena(1 << 12)
    seen = []
    a.on_transaction = lambda kind, addr, n: seen.append((kind, addr, n))
    p = a.alloc(8)
    a.write_u32(p, 1)
    a.mem_read(p, 8)
    assert seen == [("write", p, 4), ("read", p, 8)]


def test_random_fragmentation_then_full_reclaim():
    rng = random.Random(3)
    a = Arena(1 << 16)
    ps = [a.alloc(rng.randint(1, 500)) for _ in range(100)]
    rng.shuffle(ps)
    for p in ps:
        a.free(p)
    assert a.used_bytes == 0
    assert a.free_bytes == a.size - NULL_GUARD
