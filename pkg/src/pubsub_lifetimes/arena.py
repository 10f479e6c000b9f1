"""Payload storage: construct-once, read-many message slots.

Two backends share one surface:

* :class:`InProcArena` - a first-fit free list over a ``bytearray``. Reclaimed
  slots are overwritten with :data:`POISON_BYTE` and any later resolve of the
  old reference raises :class:`PoisonedPayload`. Used by tests, racelab
  cross-checks and the single-process benchmark.
* :class:`ShmArena` - a named OS shared-memory segment carved into fixed-size
  slots. The segment is created and unlinked by the broker process; the
  publisher process attaches to it and allocates, the broker reclaims.

A reference carries an allocation generation so that a stale reference to a
reused slot is never mistaken for the new occupant.
"""

from __future__ import annotations

import bisect
import struct
import threading
from dataclasses import dataclass
from multiprocessing import resource_tracker, shared_memory
from typing import Protocol

from .errors import ArenaExhausted, DoubleReclaim, PoisonedPayload, UnknownRef

POISON_BYTE = 0xDE
_ALIGN = 8


@dataclass(frozen=True, order=True)
class ArenaRef:
    arena_id: int
    offset: int
    length: int
    generation: int = 0

    def as_list(self) -> list[int]:
        return [self.arena_id, self.offset, self.length, self.generation]


class Arena(Protocol):
    arena_id: int
    capacity: int

    def allocate(self, length: int) -> tuple[ArenaRef, memoryview]: ...
    def writable(self, ref: ArenaRef) -> memoryview: ...
    def resolve(self, ref: ArenaRef) -> memoryview: ...
    def reclaim(self, ref: ArenaRef) -> None: ...
    def live_slots(self) -> int: ...


def _round_up(n: int) -> int:
    return (n + _ALIGN - 1) // _ALIGN * _ALIGN


class InProcArena:
    """First-fit free-list arena living in this process.

    ``poison=True`` (the default) is the test backend: reclaimed bytes are
    overwritten and stale resolves raise :class:`PoisonedPayload`.
    """

    def __init__(self, arena_id: int, capacity: int = 64 * 1024, poison: bool = True):
        if capacity <= 0:
            raise ValueError("capacity must be positive")
        self.arena_id = arena_id
        self.capacity = _round_up(capacity)
        self.poison = poison
        self._buf = bytearray(self.capacity)
        # sorted, coalesced list of (offset, size) free blocks
        self._free_offsets: list[int] = [0]
        self._free_sizes: dict[int, int] = {0: self.capacity}
        # offset -> (block size, requested length, generation)
        self._live: dict[int, tuple[int, int, int]] = {}
        self._next_generation = 1
        self._lock = threading.Lock()
        self.poisoned_observations = 0

    # allocation -----------------------------------------------------------
    def allocate(self, length: int) -> tuple[ArenaRef, memoryview]:
        if length <= 0:
            raise ValueError("length must be positive")
        size = _round_up(length)
        with self._lock:
            for i, off in enumerate(self._free_offsets):
                block = self._free_sizes[off]
                if block >= size:
                    break
            else:
                raise ArenaExhausted(
                    f"arena {self.arena_id}: no free block of {size} bytes "
                    f"({self.free_bytes} free, fragmented)"
                )
            del self._free_offsets[i]
            del self._free_sizes[off]
            if block > size:
                rest = off + size
                self._free_offsets.insert(i, rest)
                self._free_sizes[rest] = block - size
            gen = self._next_generation
            self._next_generation += 1
            self._live[off] = (size, length, gen)
        ref = ArenaRef(self.arena_id, off, length, gen)
        view = memoryview(self._buf)[off : off + length]
        view[:] = bytes(length)
        return ref, view

    def reclaim(self, ref: ArenaRef) -> None:
        with self._lock:
            self._check_live(ref, DoubleReclaim)
            size, _, _ = self._live.pop(ref.offset)
            if self.poison:
                self._buf[ref.offset : ref.offset + size] = bytes([POISON_BYTE]) * size
            self._insert_free(ref.offset, size)

    def _insert_free(self, off: int, size: int) -> None:
        i = bisect.bisect_left(self._free_offsets, off)
        # merge with right neighbour
        if i < len(self._free_offsets) and off + size == self._free_offsets[i]:
            nxt = self._free_offsets.pop(i)
            size += self._free_sizes.pop(nxt)
        # merge with left neighbour
        if i > 0:
            prev = self._free_offsets[i - 1]
            if prev + self._free_sizes[prev] == off:
                self._free_sizes[prev] += size
                return
        self._free_offsets.insert(i, off)
        self._free_sizes[off] = size

    # access ---------------------------------------------------------------
    def _check_live(self, ref: ArenaRef, stale_error: type[Exception]) -> None:
        if ref.arena_id != self.arena_id:
            raise UnknownRef(f"ref {ref} does not belong to arena {self.arena_id}")
        slot = self._live.get(ref.offset)
        if slot is not None and slot[2] == ref.generation and slot[1] == ref.length:
            return
        if 0 < ref.generation < self._next_generation:
            if stale_error is PoisonedPayload:
                self.poisoned_observations += 1
            raise stale_error(f"slot {ref} was reclaimed")
        raise UnknownRef(f"ref {ref} was never allocated by arena {self.arena_id}")

    def writable(self, ref: ArenaRef) -> memoryview:
        self._check_live(ref, PoisonedPayload if self.poison else UnknownRef)
        return memoryview(self._buf)[ref.offset : ref.offset + ref.length]

    def resolve(self, ref: ArenaRef) -> memoryview:
        return self.writable(ref).toreadonly()

    # accounting -----------------------------------------------------------
    def live_slots(self) -> int:
        return len(self._live)

    @property
    def live_bytes(self) -> int:
        return sum(size for size, _, _ in self._live.values())

    @property
    def free_bytes(self) -> int:
        return sum(self._free_sizes.values())

    def live_refs(self) -> list[ArenaRef]:
        with self._lock:
            return sorted(
                ArenaRef(self.arena_id, off, length, gen)
                for off, (_, length, gen) in self._live.items()
            )


# --------------------------------------------------------------------------
# shared-memory backend

_SHM_MAGIC = 0x41524E41  # "ARNA"
_HEADER = struct.Struct("<IIII")  # magic, slot_size, slot_count, reserved
_DEFAULT_SLOT = 1024


def segment_name(prefix: str, arena_id: int) -> str:
    # POSIX shm names may not contain an inner '/', so the separator is '_'
    return f"{prefix}_{arena_id}"


_attach_lock = threading.Lock()


def _attach(name: str) -> shared_memory.SharedMemory:
    # Attaching processes must not hand the broker-owned segment to their
    # resource tracker, which would unlink it when they exit.
    with _attach_lock:
        register = resource_tracker.register
        resource_tracker.register = lambda *a, **k: None
        try:
            return shared_memory.SharedMemory(name=name, create=False)
        finally:
            resource_tracker.register = register


class ShmArena:
    """Fixed-slot arena in a named shared-memory segment.

    Layout (little-endian): a 16-byte header, then one 64-bit generation word
    per slot (0 = free), then the slot bytes. Only the owning publisher
    process allocates (free -> generation); only the broker reclaims
    (generation -> free), so each word has a single writer per transition.
    Allocation is a first-fit scan of the generation table.
    """

    def __init__(
        self,
        arena_id: int,
        prefix: str,
        capacity: int = 64 * 1024,
        slot_size: int = _DEFAULT_SLOT,
        create: bool = False,
    ):
        self.arena_id = arena_id
        self.name = segment_name(prefix, arena_id)
        if create:
            slot_count = max(1, capacity // slot_size)
            size = _HEADER.size + 8 * slot_count + slot_size * slot_count
            self._shm = shared_memory.SharedMemory(name=self.name, create=True, size=size)
            _HEADER.pack_into(self._shm.buf, 0, _SHM_MAGIC, slot_size, slot_count, 0)
            self._shm.buf[_HEADER.size : _HEADER.size + 8 * slot_count] = bytes(8 * slot_count)
        else:
            self._shm = _attach(self.name)
            magic, slot_size, slot_count, _ = _HEADER.unpack_from(self._shm.buf, 0)
            if magic != _SHM_MAGIC:
                raise UnknownRef(f"segment {self.name} is not an arena")
        self.created = create
        self.slot_size = slot_size
        self.slot_count = slot_count
        self.capacity = slot_size * slot_count
        self._gens_raw = self._shm.buf[_HEADER.size : _HEADER.size + 8 * slot_count]
        self._gens = self._gens_raw.cast("Q")
        self._data_off = _HEADER.size + 8 * slot_count
        self._next_generation = 1
        self._cursor = 0
        self._lock = threading.Lock()

    def allocate(self, length: int) -> tuple[ArenaRef, memoryview]:
        if length <= 0:
            raise ValueError("length must be positive")
        if length > self.slot_size:
            raise ArenaExhausted(f"{length} bytes exceeds slot size {self.slot_size}")
        n = self.slot_count
        gens = self._gens
        with self._lock:
            for k in range(n):
                i = (self._cursor + k) % n
                if gens[i] == 0:
                    break
            else:
                raise ArenaExhausted(f"arena {self.arena_id}: all {n} slots in use")
            gen = (self.arena_id << 32 | self._next_generation) & 0xFFFFFFFFFFFFFFFF or 1
            self._next_generation += 1
            gens[i] = gen
            self._cursor = (i + 1) % n
        ref = ArenaRef(self.arena_id, self._data_off + i * self.slot_size, length, gen)
        return ref, self._view(ref)

    def _slot(self, ref: ArenaRef) -> int:
        if ref.arena_id != self.arena_id:
            raise UnknownRef(f"ref {ref} does not belong to arena {self.arena_id}")
        i, rem = divmod(ref.offset - self._data_off, self.slot_size)
        if rem or not 0 <= i < self.slot_count or ref.length > self.slot_size:
            raise UnknownRef(f"ref {ref} is not a slot of arena {self.arena_id}")
        return i

    def _view(self, ref: ArenaRef) -> memoryview:
        return self._shm.buf[ref.offset : ref.offset + ref.length]

    def writable(self, ref: ArenaRef) -> memoryview:
        i = self._slot(ref)
        if self._gens[i] != ref.generation:
            raise UnknownRef(f"slot {ref} is no longer live")
        return self._view(ref)

    def resolve(self, ref: ArenaRef) -> memoryview:
        return self.writable(ref).toreadonly()

    def reclaim(self, ref: ArenaRef) -> None:
        i = self._slot(ref)
        if self._gens[i] != ref.generation:
            raise DoubleReclaim(f"slot {ref} is not live")
        self._gens[i] = 0

    def live_slots(self) -> int:
        return sum(1 for g in self._gens if g)

    def live_refs(self) -> list[ArenaRef]:
        return [
            ArenaRef(self.arena_id, self._data_off + i * self.slot_size, self.slot_size, g)
            for i, g in enumerate(self._gens)
            if g
        ]

    def close(self) -> None:
        """Detach; a no-op for the mapping while caller views are still alive."""
        self._gens.release()
        self._gens_raw.release()
        try:
            self._shm.close()
        except BufferError:
            pass

    def unlink(self) -> None:
        self._shm.unlink()


# --------------------------------------------------------------------------


class ArenaRegistry:
    """Maps arena ids to arenas so any party can resolve or reclaim a ref."""

    def __init__(self) -> None:
        self._arenas: dict[int, Arena] = {}

    def add(self, arena: Arena) -> Arena:
        self._arenas[arena.arena_id] = arena
        return arena

    def get(self, arena_id: int) -> Arena:
        try:
            return self._arenas[arena_id]
        except KeyError:
            raise UnknownRef(f"unknown arena {arena_id}") from None

    def __contains__(self, arena_id: int) -> bool:
        return arena_id in self._arenas

    def __iter__(self):
        return iter(self._arenas.values())

    def resolve(self, ref: ArenaRef) -> memoryview:
        return self.get(ref.arena_id).resolve(ref)

    def reclaim(self, ref: ArenaRef) -> None:
        self.get(ref.arena_id).reclaim(ref)

    def live_slots(self) -> int:
        return sum(a.live_slots() for a in self._arenas.values())


class ShmRegistry(ArenaRegistry):
    """Registry that attaches to broker-owned segments on first use."""

    def __init__(self, prefix: str) -> None:
        super().__init__()
        self.prefix = prefix

    def get(self, arena_id: int) -> Arena:
        arena = self._arenas.get(arena_id)
        if arena is None:
            try:
                arena = ShmArena(arena_id, self.prefix)
            except FileNotFoundError:
                raise UnknownRef(f"no segment for arena {arena_id}") from None
            self._arenas[arena_id] = arena
        return arena

    def close(self) -> None:
        for arena in self._arenas.values():
            arena.close()  # type: ignore[attr-defined]
        self._arenas.clear()
