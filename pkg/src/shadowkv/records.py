"""Log record layout.

Every record in a server log is:

    u64 previous_address   (chain link, 0 terminates; 48 bits used)
    u64 meta               (packed, see below)
    key bytes, then value bytes, padded to an 8-byte stride

meta packing (little-endian word, bit 0 = LSB):

    bits  0..13  tag (hash bits 48..61, redundant copy for chain checks)
    bit   14     tombstone
    bit   15     invalid
    bit   16     indirection (value holds an indirection payload)
    bit   17     lock (reserved spin bit; striped locks are the real mechanism)
    bit   18     migrated copy (cleared by any later in-place update)
    bits 20..31  key length (bytes)
    bits 32..63  value length (bytes)

Indirection records carry no key; their value is the fixed 32-byte payload
packed by ``pack_indirection_value``.
"""

from __future__ import annotations

import struct

from .errors import UsageError

HEADER = struct.Struct("<QQ")
HEADER_SIZE = HEADER.size  # 16

FLAG_TOMBSTONE = 1 << 14
FLAG_INVALID = 1 << 15
FLAG_INDIRECTION = 1 << 16
FLAG_LOCK = 1 << 17
FLAG_MIGRATED = 1 << 18

_KEYLEN_SHIFT = 20
_VALLEN_SHIFT = 32
_TAG_MASK = 0x3FFF
_KEYLEN_MASK = 0xFFF

KEY_STRUCT = struct.Struct("<Q")  # keys are u64 end to end

INDIRECTION_VALUE = struct.Struct("<QQQQ")  # next_address, source_log_id, lo, hi


def pack_meta(tag: int, key_len: int, value_len: int, flags: int = 0) -> int:
    return (
        (tag & _TAG_MASK)
        | flags
        | ((key_len & _KEYLEN_MASK) << _KEYLEN_SHIFT)
        | (value_len << _VALLEN_SHIFT)
    )


def meta_tag(meta: int) -> int:
    return meta & _TAG_MASK


def meta_key_len(meta: int) -> int:
    return (meta >> _KEYLEN_SHIFT) & _KEYLEN_MASK


def meta_value_len(meta: int) -> int:
    return meta >> _VALLEN_SHIFT


def stride(key_len: int, value_len: int) -> int:
    return (HEADER_SIZE + key_len + value_len + 7) & ~7


def pack_record(
    prev: int, tag: int, key: bytes, value: bytes, flags: int = 0
) -> bytes:
    body = HEADER.pack(prev, pack_meta(tag, len(key), len(value), flags)) + key + value
    pad = -len(body) % 8
    return body + bytes(pad) if pad else body


def pack_indirection_value(next_address: int, source_log_id: int, lo: int, hi: int) -> bytes:
    # an exclusive hi of 2^64 (the top of the hash space) is stored as 0,
    # since the field is a u64; an empty guard is never written
    return INDIRECTION_VALUE.pack(next_address, source_log_id, lo, 0 if hi == 1 << 64 else hi)


class RecordView:
    """Zero-copy accessor for a record at a fixed offset in a buffer.

    The buffer may be an in-memory page or bytes fetched from disk or the
    shared tier; ``offset`` is where the header starts.
    """

    __slots__ = ("buf", "offset")

    def __init__(self, buf, offset: int = 0):
        self.buf = buf
        self.offset = offset

    @property
    def previous_address(self) -> int:
        prev, = struct.unpack_from("<Q", self.buf, self.offset)
        return prev

    @property
    def meta(self) -> int:
        m, = struct.unpack_from("<Q", self.buf, self.offset + 8)
        return m

    @property
    def tag(self) -> int:
        return meta_tag(self.meta)

    @property
    def flags(self) -> int:
        return self.meta & (
            FLAG_TOMBSTONE | FLAG_INVALID | FLAG_INDIRECTION | FLAG_LOCK | FLAG_MIGRATED
        )

    @property
    def key_len(self) -> int:
        return meta_key_len(self.meta)

    @property
    def value_len(self) -> int:
        return meta_value_len(self.meta)

    @property
    def is_indirection(self) -> bool:
        return bool(self.meta & FLAG_INDIRECTION)

    @property
    def is_tombstone(self) -> bool:
        return bool(self.meta & FLAG_TOMBSTONE)

    @property
    def key(self) -> int:
        k, = KEY_STRUCT.unpack_from(self.buf, self.offset + HEADER_SIZE)
        return k

    def key_bytes(self) -> bytes:
        start = self.offset + HEADER_SIZE
        return bytes(self.buf[start : start + self.key_len])

    def value_bytes(self) -> bytes:
        start = self.offset + HEADER_SIZE + self.key_len
        return bytes(self.buf[start : start + self.value_len])

    def stride(self) -> int:
        m = self.meta
        return stride(meta_key_len(m), meta_value_len(m))

    def record_bytes(self) -> bytes:
        return bytes(self.buf[self.offset : self.offset + self.stride()])

    def indirection(self) -> tuple[int, int, int, int]:
        """(next_address, source_log_id, range_lo, range_hi)."""
        start = self.offset + HEADER_SIZE + self.key_len
        next_address, source_log_id, lo, hi = INDIRECTION_VALUE.unpack_from(self.buf, start)
        return (next_address, source_log_id, lo, hi if hi else 1 << 64)

    # -- in-place mutation (mutable region only, caller holds the key's
    # mutation lock; readers tolerate these because each is one slice store
    # and neither changes the record's length fields) -----------------------

    def write_value(self, data: bytes) -> None:
        if len(data) != self.value_len:
            raise UsageError("in-place write must preserve the value length")
        start = self.offset + HEADER_SIZE + self.key_len
        self.buf[start : start + len(data)] = data

    def update_flags(self, set_flags: int = 0, clear_flags: int = 0) -> None:
        meta = (self.meta | set_flags) & ~clear_flags
        struct.pack_into("<Q", self.buf, self.offset + 8, meta)
