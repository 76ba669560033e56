"""Shared storage tier: per-log append-only page namespaces.

Filesystem-backed emulation of a remote blob tier. Each server log gets a
directory of fixed-size extent files; any process can read any log, only the
owning server appends to its own. Latency and IOPS injection emulate remote
behavior so experiments can shape cold-read costs.

Extent file layout (little-endian):

    u64 log_id | u64 extent_start_address | u32 crc32 x pages_per_extent
    followed by the raw pages, in address order.

A page's crc slot is written together with its bytes; unwritten slots are 0.
"""

from __future__ import annotations

import os
import struct
import threading
import time
import zlib

from .errors import UsageError

_EXTENT_HEADER = struct.Struct("<QQ")


class SharedTier:
    def __init__(
        self,
        root: str,
        page_size: int,
        extent_size: int = 64 * 1024 * 1024,
        read_latency_s: float = 0.0,
        iops_cap: int | None = None,
    ):
        if extent_size % page_size:
            raise UsageError("extent_size must be a multiple of page_size")
        self.root = root
        self.page_size = page_size
        self.extent_size = extent_size
        self.pages_per_extent = extent_size // page_size
        self.header_size = _EXTENT_HEADER.size + 4 * self.pages_per_extent
        self.read_latency_s = read_latency_s
        self.iops_cap = iops_cap
        self._next_io = 0.0
        self._io_lock = threading.Lock()
        self.reads = 0  # instrumentation: read calls served
        os.makedirs(root, exist_ok=True)

    # -- paths ---------------------------------------------------------------

    def _log_dir(self, log_id: int) -> str:
        return os.path.join(self.root, f"log-{log_id:016x}")

    def _extent_path(self, log_id: int, extent_start: int) -> str:
        return os.path.join(self._log_dir(log_id), f"{extent_start:016x}.extent")

    def _floor_path(self, log_id: int) -> str:
        return os.path.join(self._log_dir(log_id), "floor")

    # -- write side ------------------------------------------------------------

    def recover_cursor(self, log_id: int) -> int:
        """Next append address for a log, derived from extent files on disk."""
        d = self._log_dir(log_id)
        if not os.path.isdir(d):
            return 0
        cursor = self.truncation_floor(log_id)
        for name in os.listdir(d):
            if not name.endswith(".extent"):
                continue
            start = int(name[:-7], 16)
            payload = os.path.getsize(os.path.join(d, name)) - self.header_size
            cursor = max(cursor, start + payload)
        return cursor

    def append_pages(self, log_id: int, start_address: int, data: bytes) -> None:
        """Durably append whole pages at the log's cursor."""
        if start_address % self.page_size or len(data) % self.page_size:
            raise UsageError("appends must be whole page-aligned pages")
        if start_address != self.recover_cursor(log_id):
            raise UsageError(
                f"append at {start_address:#x} != cursor {self.recover_cursor(log_id):#x}"
            )
        os.makedirs(self._log_dir(log_id), exist_ok=True)
        offset = 0
        while offset < len(data):
            addr = start_address + offset
            extent_start = (addr // self.extent_size) * self.extent_size
            path = self._extent_path(log_id, extent_start)
            page_idx = (addr - extent_start) // self.page_size
            page = data[offset : offset + self.page_size]
            flags = "r+b" if os.path.exists(path) else "w+b"
            with open(path, flags) as f:
                if flags == "w+b":
                    f.write(_EXTENT_HEADER.pack(log_id, extent_start))
                    f.write(bytes(4 * self.pages_per_extent))
                f.seek(_EXTENT_HEADER.size + 4 * page_idx)
                f.write(struct.pack("<I", zlib.crc32(page)))
                f.seek(self.header_size + page_idx * self.page_size)
                f.write(page)
                f.flush()
                os.fsync(f.fileno())
            offset += self.page_size

    def writer(self, log_id: int) -> "SharedLogWriter":
        return SharedLogWriter(self, log_id)

    def truncation_floor(self, log_id: int) -> int:
        try:
            with open(self._floor_path(log_id), "rb") as f:
                return struct.unpack("<Q", f.read(8))[0]
        except FileNotFoundError:
            return 0

    def truncate_below(self, log_id: int, address: int) -> int:
        """Retire whole extents that lie entirely below ``address``.

        Returns the number of extent files removed. The floor is persisted
        separately so the append cursor survives even when every extent is
        retired; reads below the floor fail like reads past the cursor.
        """
        d = self._log_dir(log_id)
        if not os.path.isdir(d):
            return 0
        limit = min(address, self.recover_cursor(log_id))
        floor = (limit // self.extent_size) * self.extent_size
        prev = self.truncation_floor(log_id)
        if floor > prev:
            tmp = self._floor_path(log_id) + ".tmp"
            with open(tmp, "wb") as f:
                f.write(struct.pack("<Q", floor))
                f.flush()
                os.fsync(f.fileno())
            os.replace(tmp, self._floor_path(log_id))
        else:
            floor = prev
        removed = 0
        for name in os.listdir(d):
            if not name.endswith(".extent"):
                continue
            start = int(name[:-7], 16)
            payload = os.path.getsize(os.path.join(d, name)) - self.header_size
            if start + payload <= floor:
                os.remove(os.path.join(d, name))
                removed += 1
        return removed

    # -- read side ----------------------------------------------------------------

    def _throttle(self) -> None:
        if self.read_latency_s:
            time.sleep(self.read_latency_s)
        if self.iops_cap:
            with self._io_lock:
                now = time.monotonic()
                wait = self._next_io - now
                self._next_io = max(now, self._next_io) + 1.0 / self.iops_cap
            if wait > 0:
                time.sleep(wait)

    def read(self, log_id: int, address: int, length: int) -> bytes:
        """Read bytes from a log; stitches across page and extent boundaries.

        Synchronous; callers that need asynchrony run it on an I/O executor.
        Injected latency applies once per call.
        """
        self._throttle()
        self.reads += 1
        out = bytearray()
        pos = address
        remaining = length
        while remaining > 0:
            extent_start = (pos // self.extent_size) * self.extent_size
            path = self._extent_path(log_id, extent_start)
            in_extent = pos - extent_start
            chunk = min(remaining, self.extent_size - in_extent)
            try:
                with open(path, "rb") as f:
                    f.seek(self.header_size + in_extent)
                    data = f.read(chunk)
            except FileNotFoundError:
                if pos < self.truncation_floor(log_id):
                    raise UsageError(
                        f"shared-tier read below truncation floor: "
                        f"log {log_id} addr {pos:#x}"
                    ) from None
                raise UsageError(
                    f"shared-tier read past cursor: log {log_id} addr {pos:#x}"
                ) from None
            if len(data) < chunk:
                raise UsageError(
                    f"shared-tier read past cursor: log {log_id} addr {pos + len(data):#x}"
                )
            out += data
            pos += chunk
            remaining -= chunk
        return bytes(out)

    # -- audits ------------------------------------------------------------------

    def verify_extents(self, log_id: int) -> int:
        """CRC-check every written page of a log; returns pages verified."""
        d = self._log_dir(log_id)
        checked = 0
        if not os.path.isdir(d):
            return 0
        for name in sorted(os.listdir(d)):
            if not name.endswith(".extent"):
                continue
            with open(os.path.join(d, name), "rb") as f:
                _, extent_start = _EXTENT_HEADER.unpack(f.read(_EXTENT_HEADER.size))
                crcs = struct.unpack(
                    f"<{self.pages_per_extent}I", f.read(4 * self.pages_per_extent)
                )
                idx = 0
                while True:
                    page = f.read(self.page_size)
                    if not page:
                        break
                    if len(page) != self.page_size:
                        raise UsageError("torn page in extent")
                    if zlib.crc32(page) != crcs[idx]:
                        raise UsageError(
                            f"crc mismatch log {log_id} extent {extent_start:#x} page {idx}"
                        )
                    idx += 1
                    checked += 1
        return checked


class SharedLogWriter:
    """Single appender for one log: tracks the cursor between appends."""

    def __init__(self, tier: SharedTier, log_id: int):
        self.tier = tier
        self.log_id = log_id
        self.cursor = tier.recover_cursor(log_id)

    def append_pages(self, start_address: int, data: bytes) -> None:
        if start_address != self.cursor:
            raise UsageError(
                f"append at {start_address:#x} != writer cursor {self.cursor:#x}"
            )
        self.tier.append_pages(self.log_id, start_address, data)
        self.cursor += len(data)
