"""Simulated 32-bit application address space and the MEMIF port into it."""

from __future__ import annotations

import bisect
import threading
from typing import Callable, Dict, List, Optional, Tuple

__all__ = [
    "Arena",
    "ArenaError",
    "AlignmentError",
    "BoundsError",
    "DEFAULT_ARENA_SIZE",
    "NULL_GUARD",
    "OutOfMemoryError",
    "UnknownAddressError",
]

DEFAULT_ARENA_SIZE = 64 * 1024 * 1024
NULL_GUARD = 16
ALIGN = 4


class ArenaError(Exception):
    pass


class OutOfMemoryError(ArenaError, MemoryError):
    pass


class UnknownAddressError(ArenaError):
    pass


class AlignmentError(ArenaError):
    pass


class BoundsError(ArenaError):
    pass


class Arena:
    """First-fit allocator over a flat byte store.

    Addresses below ``NULL_GUARD`` are never handed out and any transaction
    touching them fails, so ``0`` works as a null pointer.  Every public
    operation holds one lock, which makes transactions atomic and totally
    ordered.
    """

    def __init__(self, size: int = DEFAULT_ARENA_SIZE) -> None:
        if size < 2 * NULL_GUARD or size & (size - 1):
            raise ValueError(f"arena size must be a power of two >= {2 * NULL_GUARD}, got {size}")
        if size > 1 << 32:
            raise ValueError("arena must fit in a 32-bit address space")
        self.size = size
        self._mem = bytearray(size)
        self._lock = threading.RLock()
        # free list: sorted starts plus parallel sizes
        self._free_starts: List[int] = [NULL_GUARD]
        self._free_sizes: List[int] = [size - NULL_GUARD]
        self._live: Dict[int, int] = {}
        self.on_transaction: Optional[Callable[[str, int, int], None]] = None

    # -- allocation -----------------------------------------------------

    def alloc(self, length: int) -> int:
        if length <= 0:
            raise ValueError(f"allocation length must be positive, got {length}")
        need = (length + ALIGN - 1) // ALIGN * ALIGN
        with self._lock:
            for i, avail in enumerate(self._free_sizes):
                if avail >= need:
                    addr = self._free_starts[i]
                    if avail == need:
                        del self._free_starts[i]
                        del self._free_sizes[i]
                    else:
                        self._free_starts[i] = addr + need
                        self._free_sizes[i] = avail - need
                    self._live[addr] = need
                    self._mem[addr:addr + need] = bytes(need)
                    return addr
            raise OutOfMemoryError(f"cannot allocate {length} bytes ({self.free_bytes} free, fragmented)")

    def free(self, address: int) -> None:
        with self._lock:
            need = self._live.pop(address, None)
            if need is None:
                raise UnknownAddressError(f"free of unknown or already freed address {address:#x}")
            i = bisect.bisect_left(self._free_starts, address)
            self._free_starts.insert(i, address)
            self._free_sizes.insert(i, need)
            # coalesce with successor, then predecessor
            if i + 1 < len(self._free_starts) and address + need == self._free_starts[i + 1]:
                self._free_sizes[i] += self._free_sizes.pop(i + 1)
                del self._free_starts[i + 1]
            if i > 0 and self._free_starts[i - 1] + self._free_sizes[i - 1] == address:
                self._free_sizes[i - 1] += self._free_sizes.pop(i)
                del self._free_starts[i]

    def block_size(self, address: int) -> int:
        with self._lock:
            try:
                return self._live[address]
            except KeyError:
                raise UnknownAddressError(f"{address:#x} is not a live block") from None

    def live_blocks(self) -> List[Tuple[int, int]]:
        with self._lock:
            return sorted(self._live.items())

    @property
    def free_bytes(self) -> int:
        with self._lock:
            return sum(self._free_sizes)

    @property
    def used_bytes(self) -> int:
        with self._lock:
            return sum(self._live.values())

    # -- MEMIF transactions --------------------------------------------

    def _check(self, address: int, length: int) -> None:
        if address % ALIGN:
            raise AlignmentError(f"address {address:#x} is not {ALIGN}-byte aligned")
        if length < 1:
            raise BoundsError(f"transaction length must be >= 1, got {length}")
        if address < NULL_GUARD or address + length > self.size:
            raise BoundsError(f"range [{address:#x}, {address + length:#x}) outside arena")

    def mem_read(self, address: int, length: int) -> bytes:
        self._check(address, length)
        with self._lock:
            data = bytes(self._mem[address:address + length])
            if self.on_transaction is not None:
                self.on_transaction("read", address, length)
            return data

    def mem_write(self, address: int, data: bytes) -> None:
        self._check(address, len(data))
        with self._lock:
            self._mem[address:address + len(data)] = data
            if self.on_transaction is not None:
                self.on_transaction("write", address, len(data))

    def read_u32(self, address: int) -> int:
        return int.from_bytes(self.mem_read(address, 4), "little")

    def write_u32(self, address: int, value: int) -> None:
        self.mem_write(address, (value & 0xFFFFFFFF).to_bytes(4, "little"))
