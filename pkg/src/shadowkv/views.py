"""Hash-range ownership: ranges, per-server view numbers, batch validation.

Ownership of the 64-bit key-hash space is split into disjoint ranges that
together cover the whole space; each range belongs to one server, and each
server carries a strictly increasing view number that changes whenever its
ownership does. A client tags a batch with the view number it believes the
addressed server holds; the server accepts the batch iff the numbers are
equal — one integer comparison, with no per-key hashing or range search.

``OwnershipMap`` values are immutable: mutation produces a new map with a
larger ``map_version``. Server threads each hold an adopted snapshot
(``ThreadViews``) and move to a newer one only at their own batch boundary,
so a view change propagates as an asynchronous cut, not a stall.
"""

from __future__ import annotations

import struct
from bisect import bisect_right
from dataclasses import dataclass
from typing import Callable, Iterable, Optional, Sequence

from ._hash import hash64
from .epochs import EpochManager
from .errors import UsageError

# The hash space is [0, 2^64). Range ends are exclusive, so the space's own
# end cannot be stored in a u64 field; the wire encoding writes 0 for it.
SPACE_END = 1 << 64

_ENTRY = struct.Struct("<QQQ")  # lo, hi (0 encodes SPACE_END), server
_VIEW = struct.Struct("<QQ")  # server, view
_MAP_HEADER = struct.Struct("<IIQ")  # entry count, view count, map_version


def _encode_hi(hi: int) -> int:
    return 0 if hi == SPACE_END else hi


def _decode_hi(hi: int) -> int:
    return SPACE_END if hi == 0 else hi


@dataclass(frozen=True, order=True)
class HashRange:
    lo: int  # inclusive
    hi: int  # exclusive; SPACE_END closes the space

    def __post_init__(self):
        if not 0 <= self.lo < self.hi <= SPACE_END:
            raise UsageError(f"invalid hash range [{self.lo:#x}, {self.hi:#x})")

    def contains(self, h: int) -> bool:
        return self.lo <= h < self.hi

    def covers(self, other: "HashRange") -> bool:
        return self.lo <= other.lo and other.hi <= self.hi

    def overlaps(self, other: "HashRange") -> bool:
        return self.lo < other.hi and other.lo < self.hi

    def span(self) -> int:
        return self.hi - self.lo


def full_space() -> HashRange:
    return HashRange(0, SPACE_END)


def subtract_ranges(base, remove) -> tuple[HashRange, ...]:
    """Segments of ``base`` not covered by any range in ``remove``."""
    out: list[HashRange] = []
    for b in base:
        segments = [b]
        for r in remove:
            nxt: list[HashRange] = []
            for s in segments:
                if r.hi <= s.lo or s.hi <= r.lo:
                    nxt.append(s)
                    continue
                if s.lo < r.lo:
                    nxt.append(HashRange(s.lo, r.lo))
                if r.hi < s.hi:
                    nxt.append(HashRange(r.hi, s.hi))
            segments = nxt
        out.extend(segments)
    return tuple(out)


class OwnershipMap:
    """Immutable ownership snapshot: disjoint covering ranges plus views.

    ``lookups`` counts range searches (``owner_of`` calls); it exists so
    tests can prove batch validation never touches the range structure.
    """

    __slots__ = ("entries", "views", "map_version", "_los", "lookups")

    def __init__(
        self,
        entries: Iterable[tuple[HashRange, int]],
        views: dict[int, int],
        map_version: int = 1,
    ):
        ordered = tuple(sorted(entries, key=lambda e: e[0].lo))
        if not ordered:
            raise UsageError("ownership map must cover the hash space")
        if ordered[0][0].lo != 0 or ordered[-1][0].hi != SPACE_END:
            raise UsageError("ownership map must cover the full hash space")
        for (a, _), (b, _) in zip(ordered, ordered[1:]):
            if a.hi != b.lo:
                raise UsageError(
                    f"ownership map has a gap or overlap at {a.hi:#x}/{b.lo:#x}"
                )
        owners = {server for _, server in ordered}
        missing = owners - views.keys()
        if missing:
            raise UsageError(f"servers {missing} own ranges but have no view")
        self.entries = ordered
        self.views = dict(views)
        self.map_version = map_version
        self._los = [r.lo for r, _ in ordered]
        self.lookups = 0  # instrumentation; racy increments are acceptable

    @classmethod
    def single_owner(cls, server: int, view: int = 1, map_version: int = 1):
        return cls([(full_space(), server)], {server: view}, map_version)

    # -- lookups ------------------------------------------------------------

    def owner_of(self, h: int) -> tuple[int, int]:
        """(owning server, its current view) for one 64-bit hash."""
        self.lookups += 1
        _, server = self.entries[bisect_right(self._los, h) - 1]
        return server, self.views[server]

    def server_ranges(self, server: int) -> tuple[HashRange, ...]:
        return tuple(r for r, s in self.entries if s == server)

    def owns(self, server: int, h: int) -> bool:
        return self.entries[bisect_right(self._los, h) - 1][1] == server

    def servers(self) -> tuple[int, ...]:
        return tuple(sorted({s for _, s in self.entries}))

    # -- derivation ----------------------------------------------------------

    def transfer(
        self, source: int, target: int, ranges: Sequence[HashRange]
    ) -> "OwnershipMap":
        """New map with ``ranges`` moved source→target and both views +1.

        Rejects (without change) unless every range is currently owned by
        ``source`` in full.
        """
        if source == target:
            raise UsageError("transfer source and target must differ")
        segs = sorted(ranges, key=lambda r: r.lo)
        if not segs:
            raise UsageError("transfer needs at least one range")
        for a, b in zip(segs, segs[1:]):
            if a.hi > b.lo:
                raise UsageError("transfer ranges overlap")
        cuts = sorted({c for s in segs for c in (s.lo, s.hi)})
        pieces: list[tuple[HashRange, int]] = []
        for r, owner in self.entries:
            bounds = [r.lo] + [c for c in cuts if r.lo < c < r.hi] + [r.hi]
            for lo, hi in zip(bounds, bounds[1:]):
                pieces.append((HashRange(lo, hi), owner))
        moved = 0
        new_entries: list[tuple[HashRange, int]] = []
        for piece, owner in pieces:
            if any(s.covers(piece) for s in segs):
                if owner != source:
                    raise UsageError(
                        f"server {source} does not own [{piece.lo:#x}, {piece.hi:#x})"
                    )
                new_entries.append((piece, target))
                moved += piece.span()
            else:
                new_entries.append((piece, owner))
        if moved != sum(s.span() for s in segs):  # unreachable given coverage
            raise UsageError("transfer ranges escape the map")
        views = dict(self.views)
        views[source] = views.get(source, 0) + 1
        views[target] = views.get(target, 0) + 1
        return OwnershipMap(_merge(new_entries), views, self.map_version + 1)

    # -- wire/wal codec --------------------------------------------------------

    def encode(self) -> bytes:
        out = [_MAP_HEADER.pack(len(self.entries), len(self.views), self.map_version)]
        for r, server in self.entries:
            out.append(_ENTRY.pack(r.lo, _encode_hi(r.hi), server))
        for server in sorted(self.views):
            out.append(_VIEW.pack(server, self.views[server]))
        return b"".join(out)

    @classmethod
    def decode(cls, data: bytes, offset: int = 0) -> "OwnershipMap":
        n_entries, n_views, version = _MAP_HEADER.unpack_from(data, offset)
        pos = offset + _MAP_HEADER.size
        entries = []
        for _ in range(n_entries):
            lo, hi, server = _ENTRY.unpack_from(data, pos)
            entries.append((HashRange(lo, _decode_hi(hi)), server))
            pos += _ENTRY.size
        views = {}
        for _ in range(n_views):
            server, view = _VIEW.unpack_from(data, pos)
            views[server] = view
            pos += _VIEW.size
        return cls(entries, views, version)

    def encoded_size(self) -> int:
        return _MAP_HEADER.size + len(self.entries) * _ENTRY.size + len(self.views) * _VIEW.size

    # -- value semantics ----------------------------------------------------------

    def __eq__(self, other) -> bool:
        return (
            isinstance(other, OwnershipMap)
            and self.entries == other.entries
            and self.views == other.views
            and self.map_version == other.map_version
        )

    def __repr__(self) -> str:
        spans = ", ".join(
            f"[{r.lo:#x},{'END' if r.hi == SPACE_END else hex(r.hi)})→{s}"
            for r, s in self.entries
        )
        return f"OwnershipMap(v{self.map_version}: {spans}; views={self.views})"


def _merge(entries: list[tuple[HashRange, int]]) -> list[tuple[HashRange, int]]:
    merged: list[tuple[HashRange, int]] = []
    for r, owner in entries:
        if merged and merged[-1][1] == owner and merged[-1][0].hi == r.lo:
            merged[-1] = (HashRange(merged[-1][0].lo, r.hi), owner)
        else:
            merged.append((r, owner))
    return merged


# -- batch validation ------------------------------------------------------------


def validate_view(batch_view: int, server_view: int) -> bool:
    """Accept a batch iff its view tag equals the server's current view.

    Deliberately key-blind: one integer comparison, regardless of batch
    size. A stale client (batch_view < server_view) and a stale server
    (batch_view > server_view) are both rejections; the latter tells the
    server to refresh its ownership snapshot before retrying.
    """
    return batch_view == server_view


def validate_hash_per_key(
    owner_map: OwnershipMap, server: int, keys: Iterable[int]
) -> list[bool]:
    """Baseline validator: hash every key and search the range structure.

    Exists only for the validation-cost comparison benchmark; the batch
    path uses ``validate_view`` instead.
    """
    return [owner_map.owner_of(hash64(k))[0] == server for k in keys]


# -- per-thread adoption of new views ----------------------------------------------


class ThreadViews:
    """Process-global ownership slot with per-thread adopted snapshots.

    ``install`` publishes a newer map and registers an epoch action; each
    server thread calls ``adopt`` at its own batch boundary (alongside its
    epoch refresh), so the action fires exactly when every thread has had
    the chance to adopt — the server-side half of the global cut.
    """

    def __init__(self, epochs: EpochManager, initial: OwnershipMap):
        self._epochs = epochs
        self._latest = initial
        self._adopted: list[OwnershipMap] = [initial] * epochs.max_threads

    def latest(self) -> OwnershipMap:
        return self._latest

    def adopted(self, thread_id: int) -> OwnershipMap:
        return self._adopted[thread_id]

    def adopt(self, thread_id: int) -> OwnershipMap:
        m = self._latest  # single reference load; atomic in CPython
        self._adopted[thread_id] = m
        return m

    def install(
        self, new_map: OwnershipMap, on_all_adopted: Optional[Callable[[], None]] = None
    ) -> None:
        if new_map.map_version <= self._latest.map_version:
            raise UsageError("installed maps must advance map_version")
        self._latest = new_map
        self._epochs.bump_with_action(on_all_adopted)
