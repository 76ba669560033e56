"""Durable coordination stand-in: ownership, views, migration dependencies.

A single-process service that plays the role an external fault-tolerant
store would in production: it owns the authoritative ownership map, commits
ownership transfers atomically (map change + both view increments + a
migration dependency record in one transaction), and survives crash-restart
via a write-ahead log. The interface is deliberately small so a real
coordination service could substitute without touching callers.

WAL format: a sequence of records ``{len: u32, crc32: u32, payload}``; the
payload's first byte is an opcode. Records are fsynced before the operation
becomes visible, so a committed response implies a replayable record. On
reopen, a torn final record (a crash mid-write) is dropped; a corrupt
record that is not the tail is an integrity failure and raises.
"""

from __future__ import annotations

import logging
import os
import struct
import threading
import zlib
from dataclasses import dataclass, field, replace

from .errors import ProtocolError, UsageError
from .views import HashRange, OwnershipMap, SPACE_END, _decode_hi, _encode_hi

logger = logging.getLogger(__name__)

_REC_HEADER = struct.Struct("<II")  # payload length, crc32(payload)

OP_BOOTSTRAP = 1
OP_TRANSFER = 2
OP_SET_FLAG = 3
OP_REVERT = 4
OP_DROP_DEP = 5

FLAG_SOURCE_DONE = 1
FLAG_TARGET_DONE = 2
FLAG_CANCELLED = 3

_FLAG_NAMES = {
    "source_done": FLAG_SOURCE_DONE,
    "target_done": FLAG_TARGET_DONE,
    "cancelled": FLAG_CANCELLED,
}

_TRANSFER_HEAD = struct.Struct("<QQQI")  # migration id, source, target, n ranges
_RANGE = struct.Struct("<QQ")
_FLAG_REC = struct.Struct("<QB")
_ID_REC = struct.Struct("<Q")


@dataclass
class MigrationDependency:
    """Two-phase-commit record for one migration."""

    migration_id: int
    source: int
    target: int
    ranges: tuple[HashRange, ...]
    source_view: int  # views before the transfer committed
    target_view: int
    source_done: bool = False
    target_done: bool = False
    cancelled: bool = False
    reverted: bool = False

    def committed(self) -> bool:
        return self.source_done and self.target_done


class MetadataStore:
    """Internally serialized; any thread may call any operation."""

    def __init__(self, path: str, sweep_interval: float | None = None):
        self._path = path
        self._lock = threading.Lock()
        self._map: OwnershipMap | None = None
        self._deps: dict[int, MigrationDependency] = {}
        self._next_id = 1
        self._view_history: dict[int, list[int]] = {}
        os.makedirs(os.path.dirname(path) or ".", exist_ok=True)
        if os.path.exists(path):
            self._replay()
        self._file = open(path, "ab")
        self._closed = False
        self._sweeper: threading.Thread | None = None
        if sweep_interval is not None:
            self._sweep_interval = sweep_interval
            self._sweeper = threading.Thread(
                target=self._sweep_loop, name="metadata-sweep", daemon=True
            )
            self._sweep_stop = threading.Event()
            self._sweeper.start()

    # -- queries ------------------------------------------------------------

    def get_ownership(self) -> OwnershipMap:
        with self._lock:
            if self._map is None:
                raise UsageError("metadata store is not bootstrapped")
            return self._map  # immutable snapshot

    def poll_changes(self, since_version: int) -> OwnershipMap | None:
        with self._lock:
            if self._map is None or self._map.map_version <= since_version:
                return None
            return self._map

    def dependency(self, migration_id: int) -> MigrationDependency:
        with self._lock:
            dep = self._deps.get(migration_id)
            if dep is None:
                raise UsageError(f"no migration dependency {migration_id}")
            return replace(dep)

    def dependencies(self) -> dict[int, MigrationDependency]:
        with self._lock:
            return {mid: replace(dep) for mid, dep in self._deps.items()}

    def view_history(self) -> dict[int, list[int]]:
        with self._lock:
            return {s: list(v) for s, v in self._view_history.items()}

    # -- mutations -----------------------------------------------------------

    def bootstrap(self, owner_map: OwnershipMap) -> None:
        with self._lock:
            if self._map is not None:
                raise UsageError("metadata store already bootstrapped")
            self._append(bytes([OP_BOOTSTRAP]) + owner_map.encode())
            self._apply_bootstrap(owner_map)

    def bootstrap_single(self, server: int) -> OwnershipMap:
        m = OwnershipMap.single_owner(server)
        self.bootstrap(m)
        return m

    def transfer_ranges(self, source: int, target: int, ranges) -> int:
        """Atomically remap ranges source→target; returns the migration id.

        The new map, both view increments, and the dependency record commit
        together or not at all; a rejected precondition changes nothing.
        """
        ranges = tuple(ranges)
        with self._lock:
            if self._map is None:
                raise UsageError("metadata store is not bootstrapped")
            new_map = self._map.transfer(source, target, ranges)  # may reject
            mid = self._next_id
            payload = bytes([OP_TRANSFER]) + _TRANSFER_HEAD.pack(
                mid, source, target, len(ranges)
            ) + b"".join(_RANGE.pack(r.lo, _encode_hi(r.hi)) for r in ranges)
            self._append(payload)
            self._apply_transfer(mid, source, target, ranges, new_map)
            return mid

    def set_flag(self, migration_id: int, which: str) -> None:
        code = _FLAG_NAMES.get(which)
        if code is None:
            raise UsageError(f"unknown migration flag {which!r}")
        with self._lock:
            dep = self._deps.get(migration_id)
            if dep is None:
                raise UsageError(f"no migration dependency {migration_id}")
            if which == "cancelled" and dep.committed():
                raise ProtocolError(
                    f"migration {migration_id} already committed; cannot cancel"
                )
            if getattr(dep, which):
                return  # idempotent
            self._append(bytes([OP_SET_FLAG]) + _FLAG_REC.pack(migration_id, code))
            self._apply_flag(migration_id, code)

    def revert_ranges(self, migration_id: int) -> None:
        """Move a cancelled migration's ranges back to the source."""
        with self._lock:
            dep = self._deps.get(migration_id)
            if dep is None:
                raise UsageError(f"no migration dependency {migration_id}")
            if not dep.cancelled:
                raise UsageError(f"migration {migration_id} is not cancelled")
            if dep.reverted:
                return
            # computed before logging so a precondition failure logs nothing
            new_map = self._map.transfer(dep.target, dep.source, dep.ranges)
            self._append(bytes([OP_REVERT]) + _ID_REC.pack(migration_id))
            self._apply_revert(migration_id, new_map)

    def sweep(self) -> int:
        """Delete dependencies whose both done flags are set."""
        removed = 0
        with self._lock:
            for mid in [m for m, d in self._deps.items() if d.committed()]:
                self._append(bytes([OP_DROP_DEP]) + _ID_REC.pack(mid))
                del self._deps[mid]
                removed += 1
        return removed

    # -- state application (shared by live ops and replay) ----------------------

    def _apply_bootstrap(self, owner_map: OwnershipMap) -> None:
        self._install_map(owner_map)

    def _apply_transfer(self, mid, source, target, ranges, new_map) -> None:
        old = self._map
        self._deps[mid] = MigrationDependency(
            migration_id=mid,
            source=source,
            target=target,
            ranges=tuple(ranges),
            source_view=old.views.get(source, 0),
            target_view=old.views.get(target, 0),
        )
        self._next_id = mid + 1
        self._install_map(new_map)

    def _apply_flag(self, migration_id: int, code: int) -> None:
        dep = self._deps[migration_id]
        if code == FLAG_SOURCE_DONE:
            dep.source_done = True
        elif code == FLAG_TARGET_DONE:
            dep.target_done = True
        else:
            dep.cancelled = True

    def _apply_revert(self, migration_id: int, new_map: OwnershipMap) -> None:
        self._deps[migration_id].reverted = True
        self._install_map(new_map)

    def _install_map(self, new_map: OwnershipMap) -> None:
        old_views = self._map.views if self._map is not None else {}
        for server, view in new_map.views.items():
            if old_views.get(server) != view:
                self._view_history.setdefault(server, []).append(view)
        self._map = new_map

    # -- write-ahead log ----------------------------------------------------------

    def _append(self, payload: bytes) -> None:
        rec = _REC_HEADER.pack(len(payload), zlib.crc32(payload)) + payload
        self._file.write(rec)
        self._file.flush()
        os.fsync(self._file.fileno())

    def _replay(self) -> None:
        with open(self._path, "rb") as f:
            data = f.read()
        pos = 0
        good = 0
        while pos < len(data):
            if pos + _REC_HEADER.size > len(data):
                break  # torn tail: header itself incomplete
            length, crc = _REC_HEADER.unpack_from(data, pos)
            end = pos + _REC_HEADER.size + length
            if end > len(data):
                break  # torn tail: payload incomplete
            payload = data[pos + _REC_HEADER.size : end]
            if zlib.crc32(payload) != crc:
                if end < len(data):
                    raise ProtocolError(
                        f"metadata log corrupt at offset {pos} (not the tail)"
                    )
                break  # torn tail: final record half-written
            self._apply_record(payload)
            pos = end
            good = pos
        if good < len(data):
            logger.warning(
                "metadata log: dropping %d torn bytes at offset %d",
                len(data) - good,
                good,
            )
            with open(self._path, "r+b") as f:
                f.truncate(good)

    def _apply_record(self, payload: bytes) -> None:
        op = payload[0]
        if op == OP_BOOTSTRAP:
            self._apply_bootstrap(OwnershipMap.decode(payload, 1))
        elif op == OP_TRANSFER:
            mid, source, target, n = _TRANSFER_HEAD.unpack_from(payload, 1)
            pos = 1 + _TRANSFER_HEAD.size
            ranges = []
            for _ in range(n):
                lo, hi = _RANGE.unpack_from(payload, pos)
                ranges.append(HashRange(lo, _decode_hi(hi)))
                pos += _RANGE.size
            new_map = self._map.transfer(source, target, ranges)
            self._apply_transfer(mid, source, target, tuple(ranges), new_map)
        elif op == OP_SET_FLAG:
            mid, code = _FLAG_REC.unpack_from(payload, 1)
            self._apply_flag(mid, code)
        elif op == OP_REVERT:
            (mid,) = _ID_REC.unpack_from(payload, 1)
            new_map = self._map.transfer(
                self._deps[mid].target, self._deps[mid].source, self._deps[mid].ranges
            )
            self._apply_revert(mid, new_map)
        elif op == OP_DROP_DEP:
            (mid,) = _ID_REC.unpack_from(payload, 1)
            self._deps.pop(mid, None)
        else:
            raise ProtocolError(f"metadata log holds unknown opcode {op}")

    # -- lifecycle -------------------------------------------------------------------

    def _sweep_loop(self) -> None:
        while not self._sweep_stop.wait(self._sweep_interval):
            try:
                self.sweep()
            except Exception:  # pragma: no cover - diagnostic only
                logger.exception("metadata sweep failed")

    def close(self) -> None:
        if self._closed:
            return
        self._closed = True
        if self._sweeper is not None:
            self._sweep_stop.set()
            self._sweeper.join(timeout=2)
        self._file.close()
