"""Hybrid log: one logical address space over memory, local disk, shared tier.

Addresses are byte offsets, allocated strictly increasing at the tail and
never reused. Four moving boundaries split the space (all page-aligned
except the tail):

    local_begin <= shared_boundary <= head_offset <= safe read-only
                <= read_only_offset <= tail_offset

Above the read-only offset records are mutable in place; between the safe
and global read-only offsets is the fuzzy band (some thread may still think
it is mutable); below head_offset pages live in local page files; below
shared_boundary they are also on the shared tier; below local_begin the
local copy has been deleted and only the shared tier serves them.

All boundary advances that retire memory from other threads' reach go
through epoch actions: shift_read_only publishes the safe offset only after
every thread has observed the shift, and eviction recycles a page buffer
only after every thread protected before the cut has refreshed. Flushing
runs on one background thread so request threads never touch the filesystem.

Local disk layout: one file per page, named ``<start:016x>.page``, with a
little-endian header {page_start_address: u64, payload_len: u32, crc32: u32}.
"""

from __future__ import annotations

import enum
import logging
import os
import queue
import struct
import threading
import zlib
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

from ._util import Counter
from .epochs import EpochManager
from .errors import Backpressure, UsageError
from .records import HEADER_SIZE, RecordView, meta_key_len, meta_value_len
from .shared_tier import SharedLogWriter, SharedTier

logger = logging.getLogger(__name__)

PAGE_HEADER = struct.Struct("<QII")  # start_address, payload_len, crc32

# Address 0 is the null chain link; the first 64 bytes of page 0 stay unused
# so no record can ever be at address 0.
NULL_ADDRESS = 0
FIRST_ADDRESS = 64


class Region(enum.Enum):
    MUTABLE = "mutable"
    READ_ONLY = "read-only"
    FUZZY = "fuzzy"
    STABLE_LOCAL = "stable-local"
    SHARED_TIER = "shared-tier"


class PageState(enum.IntEnum):
    OPEN = 0
    CLOSED = 1
    FLUSHED_LOCAL = 2


@dataclass
class PageBuffer:
    start: int
    buf: bytearray
    state: PageState = PageState.OPEN
    reclaimed: bool = False


@dataclass
class LogConfig:
    page_size: int = 32 * 1024 * 1024
    page_count: int = 8  # in-memory ring capacity; budget = page_size * count
    mutable_fraction: float = 0.9
    data_dir: str = ""
    log_id: int = 0
    io_threads: int = 4
    read_chunk: int = 4096  # first-read size for non-resident records
    poison_on_reclaim: bool = False

    def __post_init__(self):
        if self.page_size < 1024 or self.page_count < 2:
            raise UsageError("page_size >= 1KiB and page_count >= 2 required")
        if not 0.0 < self.mutable_fraction < 1.0:
            raise UsageError("mutable_fraction must be in (0, 1)")


class AsyncTicket:
    """Completion handle for a record read that needs I/O."""

    __slots__ = ("address", "kind", "record", "error", "context", "_event", "_queue")

    def __init__(self, address: int, kind: str, completion_queue=None, context=None):
        self.address = address
        self.kind = kind  # "local" | "shared"
        self.record: bytes | None = None
        self.error: Exception | None = None
        self.context = context
        self._event = threading.Event()
        self._queue = completion_queue

    def complete(self, record: bytes | None, error: Exception | None = None) -> None:
        self.record = record
        self.error = error
        self._event.set()
        if self._queue is not None:
            self._queue.append(self)

    def done(self) -> bool:
        return self._event.is_set()

    def wait(self, timeout: float | None = None) -> bytes:
        if not self._event.wait(timeout):
            raise TimeoutError(f"read of {self.address:#x} did not complete")
        if self.error is not None:
            raise self.error
        assert self.record is not None
        return self.record


class HybridLog:
    def __init__(
        self,
        config: LogConfig,
        epochs: EpochManager,
        shared_writer: SharedLogWriter | None = None,
        io_pool: ThreadPoolExecutor | None = None,
    ):
        self.config = config
        self.epochs = epochs
        self.shared_writer = shared_writer
        self._own_pool = io_pool is None
        self.io_pool = io_pool or ThreadPoolExecutor(
            max_workers=config.io_threads, thread_name_prefix="kvio"
        )
        if config.data_dir:
            os.makedirs(config.data_dir, exist_ok=True)

        ps = config.page_size
        self.page_size = ps
        self.tail_offset = FIRST_ADDRESS
        self.read_only_offset = 0
        self.safe_read_only_offset = 0
        self.head_offset = 0
        self.shared_boundary = 0
        self.local_begin = 0
        self.flushed_local = 0  # contiguous locally-durable prefix end
        self._local_flush_cursor = 0  # next address to enqueue for local flush
        self._shared_flush_cursor = 0  # next address to enqueue for shared flush

        self._pages: dict[int, PageBuffer] = {
            0: PageBuffer(0, bytearray(ps))
        }
        self._alloc_lock = threading.Lock()
        self._flush_cv = threading.Condition()
        self._cached_ro = [0] * epochs.max_threads

        self.local_disk_reads = Counter()  # record reads + flusher read-backs
        self.backpressure_events = Counter()

        self._flush_queue: "queue.Queue[tuple | None]" = queue.Queue()
        self._flusher = threading.Thread(
            target=self._flush_loop, name=f"flusher-{config.log_id}", daemon=True
        )
        self._flusher.start()
        self._closed = False

    # -- invariants -----------------------------------------------------------

    def _assert_offsets(self) -> None:
        if __debug__:
            assert (
                self.local_begin
                <= self.shared_boundary
                <= self.head_offset
                <= self.safe_read_only_offset
                <= self.read_only_offset
                <= self.tail_offset
            ), self.offsets()

    def offsets(self) -> dict[str, int]:
        return {
            "local_begin": self.local_begin,
            "shared_boundary": self.shared_boundary,
            "head": self.head_offset,
            "safe_read_only": self.safe_read_only_offset,
            "read_only": self.read_only_offset,
            "tail": self.tail_offset,
        }

    # -- allocation ---------------------------------------------------------------

    def allocate(self, size: int, auto_shift: bool = True) -> int:
        """Claim ``size`` bytes at the tail; records never straddle pages."""
        size = (size + 7) & ~7
        ps = self.page_size
        if size > ps:
            raise UsageError(f"allocation {size} exceeds page size {ps}")
        with self._alloc_lock:
            pos = self.tail_offset
            page_start = pos - (pos % ps)
            if pos + size > page_start + ps:
                page_start += ps
                pos = page_start  # old page's remainder stays zero: padding
            idx = page_start // ps
            if idx not in self._pages:
                if not self._ensure_page_locked(page_start):
                    self.backpressure_events.inc()
                    raise Backpressure("page ring full; flush/evict lagging")
            self.tail_offset = pos + size
            new_ro = self._auto_shift_target_locked() if auto_shift else None
        if new_ro is not None:
            self.shift_read_only(new_ro)
        self._assert_offsets()
        return pos

    def _ensure_page_locked(self, start: int) -> bool:
        prev = self._pages.get((start - self.page_size) // self.page_size)
        if prev is not None and prev.state == PageState.OPEN:
            prev.state = PageState.CLOSED
        if len(self._pages) >= self.config.page_count:
            self._try_auto_evict_locked()
            if len(self._pages) >= self.config.page_count:
                return False
        self._pages[start // self.page_size] = PageBuffer(start, bytearray(self.page_size))
        return True

    def _auto_shift_target_locked(self) -> int | None:
        budget = self.page_size * self.config.page_count
        mutable_budget = int(budget * self.config.mutable_fraction)
        if self.tail_offset - self.read_only_offset <= mutable_budget:
            return None
        target = self.tail_offset - mutable_budget
        target -= target % self.page_size
        return target if target > self.read_only_offset else None

    def _try_auto_evict_locked(self) -> None:
        """Advance head over fully-durable pages to make ring room."""
        limit = min(self.safe_read_only_offset, self.flushed_local)
        new_head = self.head_offset
        while new_head + self.page_size <= limit and (
            (new_head // self.page_size) in self._pages
        ):
            new_head += self.page_size
        if new_head > self.head_offset:
            self._advance_head(new_head)

    # -- read-only shift ---------------------------------------------------------

    def shift_read_only(self, new_offset: int) -> None:
        """Advance the mutable/read-only boundary and arm the flush pipeline."""
        if new_offset % self.page_size:
            raise UsageError("read-only offset must be page aligned")
        with self._alloc_lock:
            if new_offset <= self.read_only_offset:
                return
            if new_offset > self.tail_offset:
                raise UsageError("read-only offset beyond tail")
            self.read_only_offset = new_offset

        def on_all_observed(off=new_offset):
            # Every thread now sees read_only_offset >= off, so bytes below
            # are immutable: safe to flush and to classify as read-only.
            if off > self.safe_read_only_offset:
                self.safe_read_only_offset = off
            self._enqueue_local_flush(off)

        self.epochs.bump_with_action(on_all_observed)
        self._assert_offsets()

    def _enqueue_local_flush(self, up_to: int) -> None:
        with self._flush_cv:
            start = self._local_flush_cursor
            while start + self.page_size <= up_to:
                self._flush_queue.put(("local", start))
                start += self.page_size
            self._local_flush_cursor = start

    # -- eviction ------------------------------------------------------------------

    def evict_to_local(self, up_to: int) -> None:
        """Retire memory pages below ``up_to`` (must be locally durable)."""
        if up_to % self.page_size:
            raise UsageError("eviction boundary must be page aligned")
        with self._alloc_lock:
            if up_to <= self.head_offset:
                return
            self._advance_head(up_to)
        self._assert_offsets()

    def _advance_head(self, up_to: int) -> None:
        if up_to > self.safe_read_only_offset or up_to > self.flushed_local:
            raise UsageError("cannot evict beyond durable, all-observed prefix")
        self.head_offset = up_to
        poison = self.config.poison_on_reclaim
        ps = self.page_size

        def reclaim(boundary=up_to):
            for idx in [i for i in self._pages if (i + 1) * ps <= boundary]:
                page = self._pages.pop(idx, None)
                if page is not None:
                    page.reclaimed = True
                    if poison:
                        page.buf[:] = b"\xde" * len(page.buf)
            self._enqueue_shared_flush(boundary)

        self.epochs.bump_with_action(reclaim)

    def _enqueue_shared_flush(self, up_to: int) -> None:
        if self.shared_writer is None:
            return
        with self._flush_cv:
            start = self._shared_flush_cursor
            while start + self.page_size <= up_to:
                self._flush_queue.put(("shared", start))
                start += self.page_size
            self._shared_flush_cursor = start

    def flush_to_shared(self, up_to: int | None = None, timeout: float = 30.0) -> None:
        """Force the shared tier to cover everything below ``up_to`` (<= head)."""
        if self.shared_writer is None:
            raise UsageError("no shared tier configured")
        target = self.head_offset if up_to is None else min(up_to, self.head_offset)
        target -= target % self.page_size
        self._enqueue_shared_flush(target)
        with self._flush_cv:
            if not self._flush_cv.wait_for(
                lambda: self.shared_boundary >= target, timeout=timeout
            ):
                raise TimeoutError("shared-tier flush did not catch up")

    def wait_local_flushed(self, up_to: int, timeout: float = 30.0) -> None:
        with self._flush_cv:
            if not self._flush_cv.wait_for(
                lambda: self.flushed_local >= up_to, timeout=timeout
            ):
                raise TimeoutError("local flush did not catch up")

    def drop_local_to(self, up_to: int) -> None:
        """Delete local page files below ``up_to`` (must be on the shared tier)."""
        if up_to % self.page_size:
            raise UsageError("boundary must be page aligned")
        if up_to > self.shared_boundary:
            raise UsageError("local bytes may only be dropped after shared copy")
        start = self.local_begin - (self.local_begin % self.page_size)
        while start + self.page_size <= up_to:
            path = self._page_path(start)
            if os.path.exists(path):
                os.unlink(path)
            start += self.page_size
        self.local_begin = up_to
        self._assert_offsets()

    # -- classification ---------------------------------------------------------------

    def refresh_thread_cache(self, thread_id: int) -> None:
        self._cached_ro[thread_id] = self.read_only_offset

    def classify(self, address: int, thread_id: int) -> Region:
        if address >= self._cached_ro[thread_id]:
            return Region.MUTABLE
        if address >= self.safe_read_only_offset:
            return Region.FUZZY
        if address >= self.head_offset:
            return Region.READ_ONLY
        if address >= self.local_begin:
            return Region.STABLE_LOCAL
        return Region.SHARED_TIER

    # -- reads -------------------------------------------------------------------------

    def read_record(self, address: int, completion_queue=None, context=None):
        """RecordView if memory-resident, else an AsyncTicket."""
        if address >= self.head_offset:
            page = self._pages.get(address // self.page_size)
            if page is not None and not page.reclaimed:
                return RecordView(page.buf, address - page.start)
            # Raced an eviction between the address check and the page get;
            # fall through to the disk path.
        kind = "local" if address >= self.local_begin else "shared"
        ticket = AsyncTicket(address, kind, completion_queue, context)
        self.io_pool.submit(self._io_read, ticket)
        return ticket

    def try_read_resident(self, address: int) -> RecordView | None:
        page = self._pages.get(address // self.page_size)
        if page is not None and not page.reclaimed and address >= self.head_offset:
            return RecordView(page.buf, address - page.start)
        return None

    def _io_read(self, ticket: AsyncTicket) -> None:
        try:
            if ticket.kind == "local" and ticket.address >= self.local_begin:
                ticket.complete(self._read_local_record(ticket.address))
            else:
                ticket.complete(self._read_shared_record(ticket.address))
        except Exception as exc:  # surfaced on the issuing thread
            ticket.complete(None, exc)

    def _page_path(self, page_start: int) -> str:
        return os.path.join(self.config.data_dir, f"{page_start:016x}.page")

    def _read_local_record(self, address: int) -> bytes:
        ps = self.page_size
        page_start = address - (address % ps)
        in_page = address - page_start
        self.local_disk_reads.inc()
        with open(self._page_path(page_start), "rb") as f:
            f.seek(PAGE_HEADER.size + in_page)
            first = f.read(min(self.config.read_chunk, ps - in_page))
            if len(first) < HEADER_SIZE:
                raise UsageError(f"short local read at {address:#x}")
            meta, = struct.unpack_from("<Q", first, 8)
            need = (HEADER_SIZE + meta_key_len(meta) + meta_value_len(meta) + 7) & ~7
            if need <= len(first):
                return first[:need]
            rest = f.read(need - len(first))
            return first + rest

    def _read_shared_record(self, address: int) -> bytes:
        tier = self.shared_writer.tier
        ps = self.page_size
        page_end = address - (address % ps) + ps
        first = tier.read(
            self.config.log_id, address, min(self.config.read_chunk, page_end - address)
        )
        meta, = struct.unpack_from("<Q", first, 8)
        need = (HEADER_SIZE + meta_key_len(meta) + meta_value_len(meta) + 7) & ~7
        if need <= len(first):
            return first[:need]
        return first + tier.read(self.config.log_id, address + len(first), need - len(first))

    # -- sequential scans (compaction, scan-log migration) ------------------------------

    def page_bytes(self, page_start: int, count_read: bool = True) -> bytes:
        """Whole-page bytes from memory, local disk, or the shared tier."""
        page = self._pages.get(page_start // self.page_size)
        if page is not None and not page.reclaimed and page_start >= self.head_offset:
            return bytes(page.buf)
        if page_start >= self.local_begin:
            if count_read:
                self.local_disk_reads.inc()
            with open(self._page_path(page_start), "rb") as f:
                hdr = PAGE_HEADER.unpack(f.read(PAGE_HEADER.size))
                payload = f.read(hdr[1])
            if zlib.crc32(payload) != hdr[2]:
                raise UsageError(f"crc mismatch in local page {page_start:#x}")
            return payload
        return self.shared_writer.tier.read(
            self.config.log_id, page_start, self.page_size
        )

    def scan_records(self, lo: int, hi: int, count_read: bool = True):
        """Yield (address, RecordView) for every record in [lo, hi), in order."""
        ps = self.page_size
        addr = max(lo, FIRST_ADDRESS)
        hi = min(hi, self.tail_offset)
        page_start = addr - (addr % ps)
        while page_start < hi:
            data = self.page_bytes(page_start, count_read=count_read)
            pos = addr - page_start
            while pos + HEADER_SIZE <= ps and page_start + pos < hi:
                view = RecordView(data, pos)
                if view.meta == 0 and view.previous_address == 0:
                    break  # zero fill: page padding
                yield page_start + pos, view
                pos += view.stride()
            page_start += ps
            addr = page_start

    # -- in-place write access ------------------------------------------------------------

    def page_buffer(self, address: int) -> PageBuffer | None:
        return self._pages.get(address // self.page_size)

    # -- flusher thread ----------------------------------------------------------------------

    def _flush_loop(self) -> None:
        while True:
            job = self._flush_queue.get()
            if job is None:
                return
            kind, start = job
            try:
                if kind == "local":
                    self._flush_local_page(start)
                else:
                    self._flush_shared_page(start)
            except Exception:
                logger.exception("flush job %s@%#x failed", kind, start)
                # Bounded retry: park the job at the back once; offsets never
                # advance past unflushed data either way.
                self._flush_queue.put(job)

    def _flush_local_page(self, start: int) -> None:
        page = self._pages.get(start // self.page_size)
        if page is None:
            return  # already evicted, which implies it was flushed earlier
        payload = bytes(page.buf)
        tmp = self._page_path(start) + ".tmp"
        with open(tmp, "wb") as f:
            f.write(PAGE_HEADER.pack(start, len(payload), zlib.crc32(payload)))
            f.write(payload)
            f.flush()
            os.fsync(f.fileno())
        os.replace(tmp, self._page_path(start))
        page.state = PageState.FLUSHED_LOCAL
        with self._flush_cv:
            if start == self.flushed_local:
                self.flushed_local = start + self.page_size
            self._flush_cv.notify_all()

    def _flush_shared_page(self, start: int) -> None:
        if self.shared_writer is None or start != self.shared_writer.cursor:
            return
        page = self._pages.get(start // self.page_size)
        if page is not None and not page.reclaimed and start >= self.head_offset:
            payload = bytes(page.buf)
        else:
            self.local_disk_reads.inc()
            with open(self._page_path(start), "rb") as f:
                f.seek(PAGE_HEADER.size)
                payload = f.read(self.page_size)
        self.shared_writer.append_pages(start, payload)
        with self._flush_cv:
            self.shared_boundary = start + self.page_size
            self._flush_cv.notify_all()

    # -- lifecycle ------------------------------------------------------------------------------

    def close(self) -> None:
        if self._closed:
            return
        self._closed = True
        self._flush_queue.put(None)
        self._flusher.join(timeout=5)
        if self._own_pool:
            self.io_pool.shutdown(wait=False)
