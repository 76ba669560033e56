"""Hash index: key-hash to head-of-chain logical address.

Storage is one flat ``array('Q')`` of packed 64-bit entry words, eight words
per bucket: seven entry slots plus one overflow pointer slot. Overflow
buckets use the same layout and are allocated past the primary region.

Entry word layout (a local convention, recorded in docs/wire.md):

    bit  63     tentative
    bits 62..49 tag (14 bits, hash bits 48..61)
    bit  48     occupancy marker (lets a tag-0/address-0 entry differ from
                a free slot, whose whole word is 0)
    bits 47..0  logical address (0 = empty chain)

Mutations are single-word compare-and-swap operations; in this codebase CAS
is emulated with striped locks whose critical sections are a handful of
array reads/writes, never I/O or another entry's CAS. Reads are plain array
loads. At most one non-tentative entry per (bucket, tag) exists at any time;
the two-phase tentative insert below preserves that without a bucket lock.
"""

from __future__ import annotations

import threading
from array import array
from dataclasses import dataclass

from ._hash import bucket_of, tag_of
from .errors import ResourceExhausted, UsageError

SLOTS_PER_BUCKET = 7
WORDS_PER_BUCKET = 8

TENTATIVE_BIT = 1 << 63
OCCUPIED_BIT = 1 << 48
TAG_SHIFT = 49
TAG_MASK = 0x3FFF
ADDRESS_MASK = (1 << 48) - 1

_CAS_STRIPES = 64


def pack_entry(tag: int, address: int, tentative: bool = False) -> int:
    word = OCCUPIED_BIT | ((tag & TAG_MASK) << TAG_SHIFT) | (address & ADDRESS_MASK)
    if tentative:
        word |= TENTATIVE_BIT
    return word


def entry_tag(word: int) -> int:
    return (word >> TAG_SHIFT) & TAG_MASK


def entry_address(word: int) -> int:
    return word & ADDRESS_MASK


def entry_is_tentative(word: int) -> bool:
    return bool(word & TENTATIVE_BIT)


@dataclass(frozen=True)
class EntryHandle:
    """Stable reference to one entry slot (index identity + word offset)."""

    index: "HashIndex"
    offset: int

    def load(self) -> int:
        return self.index._words[self.offset]

    @property
    def address(self) -> int:
        return entry_address(self.load())

    @property
    def tag(self) -> int:
        return entry_tag(self.load())


class HashIndex:
    def __init__(self, bucket_count: int, overflow_limit: int | None = None):
        if bucket_count < 2 or bucket_count & (bucket_count - 1):
            raise UsageError("bucket_count must be a power of two >= 2")
        self.bucket_count = bucket_count
        self.bucket_mask = bucket_count - 1
        self.overflow_limit = overflow_limit if overflow_limit is not None else bucket_count
        self._words = array("Q", bytes(8 * WORDS_PER_BUCKET * bucket_count))
        self._overflow_count = 0
        self._free_overflow: list[int] = []
        self._alloc_lock = threading.Lock()
        self._cas_locks = [threading.Lock() for _ in range(_CAS_STRIPES)]

    # -- low-level atomics ---------------------------------------------------

    def _cas_word(self, offset: int, expected: int, desired: int) -> bool:
        lock = self._cas_locks[(offset >> 3) & (_CAS_STRIPES - 1)]
        with lock:
            if self._words[offset] != expected:
                return False
            self._words[offset] = desired
            return True

    # -- chain iteration -----------------------------------------------------

    def _bucket_offsets(self, bucket: int):
        """Yield the word offset of every entry slot in a bucket chain."""
        base = bucket * WORDS_PER_BUCKET
        while True:
            for i in range(SLOTS_PER_BUCKET):
                yield base + i
            nxt = self._words[base + SLOTS_PER_BUCKET]
            if nxt == 0:
                return
            base = nxt * WORDS_PER_BUCKET

    # -- operations ------------------------------------------------------------

    def find_entry(self, hash64: int) -> EntryHandle | None:
        tag = tag_of(hash64)
        for off in self._bucket_offsets(bucket_of(hash64, self.bucket_mask)):
            word = self._words[off]
            if word and not (word & TENTATIVE_BIT) and entry_tag(word) == tag:
                return EntryHandle(self, off)
        return None

    def find_or_create_entry(self, hash64: int) -> EntryHandle:
        tag = tag_of(hash64)
        bucket = bucket_of(hash64, self.bucket_mask)
        while True:
            free_off = None
            for off in self._bucket_offsets(bucket):
                word = self._words[off]
                if word:
                    if not (word & TENTATIVE_BIT) and entry_tag(word) == tag:
                        return EntryHandle(self, off)
                elif free_off is None:
                    free_off = off
            if free_off is None:
                self._grow_overflow(bucket)
                continue
            # Phase 1: claim the slot tentatively.
            if not self._cas_word(free_off, 0, pack_entry(tag, 0, tentative=True)):
                continue
            # Phase 2: duplicate scan. Another inserter may have claimed a
            # different slot for the same tag. Ties between two tentative
            # claims break deterministically toward the lower offset so the
            # pair cannot back off forever.
            duplicate = False
            for off in self._bucket_offsets(bucket):
                if off == free_off:
                    continue
                word = self._words[off]
                if word and entry_tag(word) == tag:
                    if not (word & TENTATIVE_BIT) or off < free_off:
                        duplicate = True
                        break
            if duplicate:
                self._cas_word(free_off, pack_entry(tag, 0, tentative=True), 0)
                continue
            self._cas_word(free_off, pack_entry(tag, 0, tentative=True), pack_entry(tag, 0))
            return EntryHandle(self, free_off)

    def try_update_entry(self, handle: EntryHandle, expected: int, desired: int) -> bool:
        return self._cas_word(handle.offset, expected, desired)

    def delete_entry(self, handle: EntryHandle) -> None:
        lock = self._cas_locks[(handle.offset >> 3) & (_CAS_STRIPES - 1)]
        with lock:
            self._words[handle.offset] = 0

    # -- overflow allocation -----------------------------------------------------

    def _grow_overflow(self, bucket: int) -> None:
        """Link one more overflow bucket at the end of ``bucket``'s chain."""
        tail = bucket * WORDS_PER_BUCKET
        while True:
            nxt = self._words[tail + SLOTS_PER_BUCKET]
            if nxt == 0:
                break
            tail = nxt * WORDS_PER_BUCKET
        with self._alloc_lock:
            if self._free_overflow:
                new_id = self._free_overflow.pop()
            else:
                if self._overflow_count >= self.overflow_limit:
                    raise ResourceExhausted("overflow bucket limit reached")
                new_id = self.bucket_count + self._overflow_count
                self._overflow_count += 1
                self._words.extend(bytes(8 * WORDS_PER_BUCKET))
        if not self._cas_word(tail + SLOTS_PER_BUCKET, 0, new_id):
            # Lost the race to extend this chain; recycle and let the caller
            # rescan (the winner's bucket may hold a free slot already).
            with self._alloc_lock:
                self._free_overflow.append(new_id)

    # -- scans (tests, migration, audits) -------------------------------------

    def primary_buckets(self) -> int:
        return self.bucket_count

    def chain_entries(self, bucket: int) -> list[tuple[int, int]]:
        """All occupied non-tentative (offset, word) pairs of one bucket chain."""
        out = []
        for off in self._bucket_offsets(bucket):
            word = self._words[off]
            if word and not (word & TENTATIVE_BIT):
                out.append((off, word))
        return out

    def geometry(self) -> tuple[int, int]:
        """(bucket_count, tag bits); peers must match for record handoff."""
        return (self.bucket_count, 14)
