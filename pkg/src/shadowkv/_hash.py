"""Key hashing.

Every component that looks at a key hash (index buckets, ownership ranges,
range splits in migration) uses the same function: a 64-bit finalization mix
with full avalanche. The function is a fixed convention of this codebase and
must never change across versions, or on-disk indirection metadata and
ownership ranges stop lining up between peers. Constants and reference
vectors are recorded in docs/wire.md and frozen in tests.
"""

from __future__ import annotations

MASK64 = 0xFFFF_FFFF_FFFF_FFFF

_M1 = 0xFF51_AFD7_ED55_8CCD
_M2 = 0xC4CE_B9FE_1A85_EC53


def hash64(key: int) -> int:
    """Mix a 64-bit key into a 64-bit hash with avalanche behavior.

    Keys outside [0, 2^64) are first reduced mod 2^64.
    """
    h = key & MASK64
    h ^= h >> 33
    h = (h * _M1) & MASK64
    h ^= h >> 33
    h = (h * _M2) & MASK64
    h ^= h >> 33
    return h


def tag_of(h: int) -> int:
    """14 disambiguation bits, taken from hash bits 48..61.

    Disjoint from bucket-index bits for any bucket count up to 2^48.
    """
    return (h >> 48) & 0x3FFF


def bucket_of(h: int, bucket_mask: int) -> int:
    """Bucket index from the low hash bits. bucket_mask = bucket_count - 1."""
    return h & bucket_mask
