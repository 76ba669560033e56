"""Scale-out migration: live ownership transfer between servers.

One ``MigrationRuntime`` attaches to each server process and plays both
roles. As a source it walks the phases Sampling -> Prepare -> Transfer ->
Migrate -> Complete, each boundary an epoch cut, shipping hot sampled
records at the ownership flip and the rest either as in-memory records plus
indirection stand-ins (indirection mode) or via a sequential disk scan
(scan mode). As a target it pends requests for the incoming ranges until
ownership arrives, installs shipped records idempotently, resolves
indirections by fetching chain segments from the source's log on the
shared tier, and answers compaction notices by retiring stand-ins.

Cancellation reverts ownership, bounces gated requests back to the
clients, and returns the target's own writes to the source so nothing is
lost. Compaction forwards still-live records of moved ranges to the
current owner, which keeps them only while its lookup path still crosses
a covering indirection.
"""

from __future__ import annotations

import logging
import threading
import time
from collections import deque
from concurrent.futures import ThreadPoolExecutor

from ._hash import hash64
from .errors import Backpressure, ProtocolError, UsageError
from .hash_index import entry_address, entry_tag
from .hybrid_log import NULL_ADDRESS, AsyncTicket
from .records import FLAG_INVALID, FLAG_MIGRATED
from .views import HashRange, subtract_ranges
from .wire import (
    ERR_BAD_MESSAGE,
    ERR_INTERNAL,
    ERR_REJECTED,
    ERR_UNKNOWN_ID,
    MODE_INDIRECTION,
    MODE_SCAN_LOG,
    MSG_CANCEL_COMPLETE,
    MSG_CANCEL_MIGRATION,
    MSG_COMPACTION_NOTICE,
    MSG_COMPLETE_MIGRATION,
    MSG_CTL_ERR,
    MSG_CTL_OK,
    MSG_MIGRATE,
    MSG_PREP_FOR_TRANSFER,
    MSG_PUSH_RECORDS,
    MSG_TRANSFER_OWNERSHIP,
    PUSH_BACK,
    PUSH_BULK,
    PUSH_FORWARD,
    PUSH_SCAN,
    RF_INDIRECTION,
    RF_TOMBSTONE,
    CompactionNotice,
    Migrate,
    PrepForTransfer,
    PushRecords,
    TransferOwnership,
    WireRecord,
    encode_frame,
    pack_compaction_notice,
    pack_ctl_err,
    pack_ctl_ok,
    pack_migrate,
    pack_migration_id,
    pack_prep,
    pack_push_records,
    pack_transfer_ownership,
    parse_compaction_notice,
    parse_ctl_err,
    parse_ctl_ok,
    parse_migrate,
    parse_migration_id,
    parse_prep,
    parse_push_records,
    parse_transfer_ownership,
)

logger = logging.getLogger(__name__)

# source phases
NORMAL = "normal"
SAMPLING = "sampling"
PREPARE = "prepare"
TRANSFER = "transfer"
MIGRATE = "migrate"
COMPLETE = "complete"
CANCELLING = "cancelling"

# target phases
TARGET_PREPARE = "target-prepare"
TARGET_RECEIVE = "target-receive"

# registry sentinel: a version written by this server after the ownership
# flip outranks anything any peer can ever ship for the key
NATIVE_WINS = (1 << 64, 1 << 64)


def intersect(a: HashRange, b: HashRange) -> HashRange | None:
    lo = max(a.lo, b.lo)
    hi = min(a.hi, b.hi)
    return HashRange(lo, hi) if lo < hi else None


def chain_may_hold(tag: int, r: HashRange) -> bool:
    """Whether any 64-bit hash with index tag ``tag`` can fall in ``r``.

    A chain is addressed by (bucket, tag); tag fixes hash bits 48..61, so
    all its hashes lie in one of four aligned 2^48 hulls (one per setting
    of the untagged top two bits). False positives only cost a spurious
    indirection record; false negatives are impossible.
    """
    for top in range(4):
        base = (top << 62) | (tag << 48)
        if base < r.hi and r.lo < base + (1 << 48):
            return True
    return False


class MigrationConfig:
    def __init__(
        self,
        sampled_capacity: int = 4096,
        batch_record_limit: int = 256,
        sampling_duration_s: float = 0.004,
        buckets_per_step: int = 64,
    ):
        self.sampled_capacity = sampled_capacity
        self.batch_record_limit = batch_record_limit
        self.sampling_duration_s = sampling_duration_s
        self.buckets_per_step = buckets_per_step


class _PeerConn:
    """An outbound connection with FIFO reply matching."""

    __slots__ = ("transport", "labels")

    def __init__(self, transport):
        self.transport = transport
        self.labels: deque[str] = deque()

    def send(self, kind: int, body: bytes, label: str | None = None) -> int:
        frame = encode_frame(kind, body)
        self.transport.send_bytes(frame)
        if label is not None:
            self.labels.append(label)
        return len(frame)


class _SourceState:
    def __init__(self, mid, target_id, target_addr, mode, ranges, tail_at_start, threads):
        self.mid = mid
        self.target_id = target_id
        self.target_addr = target_addr
        self.mode = mode
        self.ranges = ranges
        self.tail_at_start = tail_at_start
        self.phase = NORMAL
        self.aborted = False
        self.sampled: set[int] = set()
        self.sampling_started = time.monotonic()
        self.sampling_cut_requested = False
        self.prep_sent = False
        self.prep_acked = False
        self.flush_done = False
        self.drained: set[int] = set()
        self.transfer_cut_requested = False
        self.transfer_sent = False
        self.migrate_cut_requested = False
        self.regions: dict[int, tuple[int, int]] = {}  # tid -> [lo, hi) buckets
        self.cursor: dict[int, int] = {}
        self.region_done: set[int] = set()
        self.scan_done = False
        self.pushes_sent = 0
        self.pushes_acked = 0
        self.complete_sent = False
        self.conns: dict[int, _PeerConn] = {}  # per-thread links to the target
        self.stats = {
            "migration_id": mid,
            "mode": "indirection" if mode == MODE_INDIRECTION else "scan",
            "sampled_copies": 0,
            "records_pushed": 0,
            "indirections_sent": 0,
            "wire_bytes": 0,
            "shared_bytes": 0,
            "migrate_local_disk_reads": 0,
            "started_at": time.monotonic(),
            "completed_at": None,
        }
        self.shared_boundary_at_start = 0
        self.disk_reads_at_migrate = 0


class _TargetState:
    def __init__(self, mid, source_id, source_log_id, ranges):
        self.mid = mid
        self.source_id = source_id
        self.source_log_id = source_log_id
        self.ranges = ranges
        self.phase = TARGET_PREPARE
        self.tail_at_receive = 0
        self.installed_indirections: list[int] = []  # record addresses
        self.stats = {
            "migration_id": mid,
            "pend_high_water": 0,
            "records_installed": 0,
            "records_skipped": 0,
            "indirections_installed": 0,
            "transfer_received_at": None,
            "first_bulk_at": None,
        }
        self.bulk_key_arrivals: dict[int, float] = {}


class ForeignFetcher:
    """Deduplicated asynchronous reads of peer logs on the shared tier.

    Concurrent pends for one (log, address) share a single read; each
    waiter still gets its completion on its own thread's queue.
    """

    def __init__(self, tier, workers: int = 2):
        self.tier = tier
        self._lock = threading.Lock()
        self._waiters: dict[tuple[int, int], list] = {}
        self._pool = ThreadPoolExecutor(max_workers=workers, thread_name_prefix="fetch")
        self.fetches: dict[tuple[int, int], int] = {}
        self.fetches_total = 0
        self.misses = 0

    def fetch(self, log_id: int, address: int, queue, ctx) -> None:
        key = (log_id, address)
        with self._lock:
            waiters = self._waiters.get(key)
            if waiters is not None:
                waiters.append((queue, ctx))
                return
            self._waiters[key] = [(queue, ctx)]
            self.fetches[key] = self.fetches.get(key, 0) + 1
            self.fetches_total += 1
        self._pool.submit(self._run, log_id, address)

    def _run(self, log_id: int, address: int) -> None:
        length = self.tier.page_size - (address % self.tier.page_size)
        data, error = None, None
        try:
            data = self.tier.read(log_id, address, length)
        except Exception as exc:
            # the protocol guarantees durability before an indirection is
            # shipped, so a miss here is an invariant violation
            self.misses += 1
            logger.error("shared-tier fetch failed for log %d @%#x: %s", log_id, address, exc)
            error = ProtocolError(f"shared-tier fetch failed: {exc}")
        with self._lock:
            waiters = self._waiters.pop((log_id, address), [])
        for queue, ctx in waiters:
            ticket = AsyncTicket(address, "shared", queue, ctx)
            ticket.complete(data, error)

    def close(self) -> None:
        self._pool.shutdown(wait=False)


class ForeignLogTable:
    """What this server knows about records that came from other logs.

    ``registry`` remembers, per key, the newest (log, address) version a
    peer has shipped (or ``NATIVE_WINS`` once a local write outranks all of
    them); ``indirections`` maps (log, next_address) to the installed
    stand-in's local address so re-deliveries dedupe and compaction notices
    can retire them.
    """

    def __init__(self):
        self.registry: dict[int, tuple[int, int]] = {}
        self.indirections: dict[tuple[int, int], int] = {}


class MigrationRuntime:
    """Attaches migration behavior to one server process."""

    def __init__(self, server, metadata, dialer, tier=None, config: MigrationConfig | None = None):
        self.server = server
        self.store = server.store
        self.metadata = metadata
        self.dialer = dialer  # (server_id, addr_hint) -> transport
        self.tier = tier
        self.config = config or MigrationConfig()
        self.foreign = ForeignLogTable()
        self.fetcher = ForeignFetcher(tier) if tier is not None else None
        self._lock = threading.Lock()  # guards role slots and state flips
        self.source: _SourceState | None = None
        self.target: _TargetState | None = None
        # ranges whose handoff this server has received; map installs that
        # grant them do not need to warm (the data is already here)
        self.received_ranges: list[HashRange] = []
        self.last_source_stats: dict | None = None
        self.last_target_stats: dict | None = None
        self.forward_decisions: list[tuple[int, bool]] = []
        self.compacted_to = 0
        self.compaction_stats: dict | None = None

        server.control_handler = self._control
        server.migration_step = self.step
        server.gate_filter = self._filter_warming
        server.on_ranges_lost = self._on_ranges_lost
        if self.fetcher is not None:
            self.store.foreign_reader = self.fetcher.fetch
        self.store.foreign_record_sink = self._on_foreign_record

    def _filter_warming(self, gained):
        return subtract_ranges(gained, tuple(self.received_ranges))

    def _on_ranges_lost(self, lost) -> None:
        self.received_ranges = list(
            subtract_ranges(tuple(self.received_ranges), lost)
        )

    # -- store hooks -------------------------------------------------------------

    def _ingest_retry(self, key, value, tombstone, flags, only_if_absent) -> bool:
        """Ingest like a dispatch loop would: absorb ring backpressure."""
        while True:
            try:
                return self.store.ingest(
                    key, value, tombstone=tombstone, flags=flags,
                    only_if_absent=only_if_absent,
                )
            except Backpressure:
                self.store.refresh()
                try:
                    self.store.complete_pending()
                except Backpressure:
                    pass
                time.sleep(0.0002)

    def _on_foreign_record(self, key, view, log_id, address) -> None:
        """A read resolved through a foreign log: localize the record."""
        if view is None:
            return  # definitive miss; nothing to copy
        self._guarded_ingest(
            key, view.value_bytes(), view.is_tombstone, log_id, address
        )

    def _sampler(self, tail_at_start, ranges, sampled, capacity):
        def observe(key: int, kind: str) -> None:
            h = hash64(key)
            for r in ranges:
                if r.contains(h):
                    break
            else:
                return
            if self.store.refresh_to_tail(key, tail_at_start):
                src = self.source
                if src is not None:
                    src.stats["sampled_copies"] += 1
            if len(sampled) < capacity:
                sampled.add(key)

        return observe

    # -- control dispatch -----------------------------------------------------------

    def _control(self, server, conn, kind: int, body, tid: int) -> None:
        body = bytes(body)
        try:
            if kind == MSG_MIGRATE:
                self._on_migrate(conn, parse_migrate(body))
            elif kind == MSG_PREP_FOR_TRANSFER:
                self._on_prep(conn, parse_prep(body))
            elif kind == MSG_TRANSFER_OWNERSHIP:
                self._on_transfer(conn, parse_transfer_ownership(body))
            elif kind == MSG_PUSH_RECORDS:
                self._on_push(conn, parse_push_records(body))
            elif kind == MSG_COMPLETE_MIGRATION:
                self._on_complete(conn, parse_migration_id(body))
            elif kind == MSG_CANCEL_MIGRATION:
                self._on_cancel(conn, parse_migration_id(body))
            elif kind == MSG_COMPACTION_NOTICE:
                self._on_compaction_notice(conn, parse_compaction_notice(body))
            else:
                raise ProtocolError(f"unexpected control frame kind {kind:#x}")
        except ProtocolError:
            raise  # malformed frame: the server closes the connection
        except UsageError as exc:
            self._err(conn, ERR_REJECTED, str(exc))
        except Exception as exc:  # pragma: no cover - defensive
            logger.exception("control frame %#x failed", kind)
            self._err(conn, ERR_INTERNAL, str(exc))

    @staticmethod
    def _ok(conn, a: int = 0, b: int = 0) -> None:
        conn.transport.send_bytes(encode_frame(MSG_CTL_OK, pack_ctl_ok(a, b)))

    @staticmethod
    def _err(conn, code: int, message: str) -> None:
        conn.transport.send_bytes(encode_frame(MSG_CTL_ERR, pack_ctl_err(code, message)))

    # -- source: starting -------------------------------------------------------------

    def _on_migrate(self, conn, m: Migrate) -> None:
        if m.mode not in (MODE_INDIRECTION, MODE_SCAN_LOG):
            self._err(conn, ERR_BAD_MESSAGE, f"unknown migration mode {m.mode}")
            return
        with self._lock:
            if self.source is not None:
                self._err(conn, ERR_REJECTED, "a migration is already running here")
                return
            ranges = tuple(m.ranges)
            latest = self.server.views.latest()
            for r in ranges:
                owner, _ = latest.owner_of(r.lo)
                if owner != self.server.server_id:
                    self._err(
                        conn, ERR_REJECTED,
                        f"range [{r.lo:#x},{r.hi:#x}) is not owned by this server",
                    )
                    return
            # Keep serving under the outgoing view until the Transfer cut;
            # the metadata commit below would otherwise be adopted early.
            self.server.hold_view_refresh = True
            try:
                mid = self.metadata.transfer_ranges(
                    self.server.server_id, m.target_id, ranges
                )
            except (UsageError, ProtocolError) as exc:
                self.server.hold_view_refresh = False
                self._err(conn, ERR_REJECTED, f"ownership transfer refused: {exc}")
                return
            src = _SourceState(
                mid, m.target_id, m.target_addr, m.mode, ranges,
                self.store.log.tail_offset, self.server.config.threads,
            )
            src.shared_boundary_at_start = self.store.log.shared_boundary
            src.phase = SAMPLING
            self.store.op_observer = self._sampler(
                src.tail_at_start, ranges, src.sampled, self.config.sampled_capacity
            )
            self.source = src
        logger.info(
            "migration %d started: %d range(s) -> server %d (%s mode)",
            mid, len(ranges), m.target_id, src.stats["mode"],
        )
        self._ok(conn, mid)

    def start_migration(self, target_id: int, ranges, mode: int, target_addr: str = "") -> int:
        """In-process entry point with the same semantics as a MIGRATE frame."""
        outbox = []

        class _Out:
            class transport:
                @staticmethod
                def send_bytes(data):
                    outbox.append(data)

        self._control(
            self.server, _Out, MSG_MIGRATE,
            pack_migrate(Migrate(0, target_id, mode, tuple(ranges), target_addr)),
            0,
        )
        kind, payload = outbox[0][4], outbox[0][5:]
        if kind == MSG_CTL_ERR:
            code, message = parse_ctl_err(payload)
            raise UsageError(f"migration refused ({code}): {message}")
        mid, _ = parse_ctl_ok(payload)
        return mid

    def cancel_migration(self, migration_id: int) -> None:
        """In-process cancel with the same semantics as a CANCEL frame."""
        outbox = []

        class _Out:
            class transport:
                @staticmethod
                def send_bytes(data):
                    outbox.append(data)

        self._control(
            self.server, _Out, MSG_CANCEL_MIGRATION, pack_migration_id(migration_id), 0
        )
        kind, payload = outbox[0][4], outbox[0][5:]
        if kind == MSG_CTL_ERR:
            code, message = parse_ctl_err(payload)
            raise UsageError(f"cancel refused ({code}): {message}")

    # -- source: the phase driver ----------------------------------------------------

    def step(self, tid: int) -> None:
        src = self.source
        if src is None:
            return
        self._poll_source_conns(src)
        if src is not self.source:  # a reply finished or aborted the run
            return
        phase = src.phase
        if phase == SAMPLING:
            self._step_sampling(src, tid)
        elif phase == PREPARE:
            self._step_prepare(src, tid)
        elif phase == TRANSFER:
            self._step_transfer(src, tid)
        elif phase == MIGRATE:
            self._step_migrate(src, tid)

    def _conn(self, src: _SourceState, tid: int) -> _PeerConn:
        conn = src.conns.get(tid)
        if conn is None:
            conn = _PeerConn(self.dialer(src.target_id, src.target_addr))
            src.conns[tid] = conn
        return conn

    def _poll_source_conns(self, src: _SourceState) -> None:
        for conn in list(src.conns.values()):
            for kind, body in conn.transport.poll():
                self._on_source_reply(src, conn, kind, bytes(body))

    def _on_source_reply(self, src: _SourceState, conn: _PeerConn, kind: int, body: bytes) -> None:
        if kind == MSG_PUSH_RECORDS:  # cancellation push-back stream
            push = parse_push_records(body)
            if push.kind != PUSH_BACK:
                raise ProtocolError("unexpected push kind on a source link")
            for group in push.groups:
                for rec in group:
                    if rec.is_indirection:
                        continue
                    # returned records are the target's own accepted writes:
                    # strictly newer than anything this server holds
                    self._ingest_retry(
                        rec.key, rec.value, rec.is_tombstone, 0,
                        only_if_absent=False,
                    )
            return
        if kind == MSG_CANCEL_COMPLETE:
            self._finish_cancel(src)
            return
        label = conn.labels.popleft() if conn.labels else "?"
        if kind == MSG_CTL_ERR:
            code, message = parse_ctl_err(body)
            logger.error("migration %d: target rejected %s: %s", src.mid, label, message)
            self._abort_source(src, f"{label} rejected: {message}")
            return
        if kind != MSG_CTL_OK:
            raise ProtocolError(f"unexpected frame kind {kind:#x} from migration target")
        if label == "prep":
            src.prep_acked = True
        elif label == "transfer":
            self._enter_migrate_cut(src)
        elif label == "push":
            src.pushes_acked += 1
        elif label == "complete":
            self._finish_source(src)

    def _step_sampling(self, src: _SourceState, tid: int) -> None:
        if tid != 0 or src.sampling_cut_requested:
            return
        if time.monotonic() - src.sampling_started < self.config.sampling_duration_s:
            return
        src.sampling_cut_requested = True

        def enter_prepare():
            self.store.op_observer = None
            if not src.aborted:
                src.phase = PREPARE

        self.store.epochs.bump_with_action(enter_prepare)

    def _step_prepare(self, src: _SourceState, tid: int) -> None:
        if self.store.pending_count() == 0:
            src.drained.add(tid)
        if tid != 0:
            return
        if not src.prep_sent:
            conn = self._conn(src, 0)
            body = pack_prep(PrepForTransfer(
                src.mid, self.server.server_id, self.store.config.log_id,
                self.store.index.bucket_count, src.ranges,
            ))
            src.stats["wire_bytes"] += conn.send(MSG_PREP_FOR_TRANSFER, body, "prep")
            src.prep_sent = True
        if not src.flush_done:
            if src.mode == MODE_INDIRECTION:
                # everything below head must be durable on the shared tier
                # before any indirection can point at it
                self.store.log.flush_to_shared(self.store.log.head_offset)
            src.flush_done = True
        if (
            src.prep_acked
            and src.flush_done
            and len(src.drained) >= self.server.config.threads
            and not src.transfer_cut_requested
        ):
            src.transfer_cut_requested = True
            new_map = self.metadata.get_ownership()

            def enter_transfer():
                if not src.aborted:
                    src.phase = TRANSFER

            # Adopting the new view is the ownership flip: from this cut on,
            # batches for the moved ranges are rejected here.
            self.server.hold_view_refresh = False
            self.server.install_map(new_map, enter_transfer)

    def _step_transfer(self, src: _SourceState, tid: int) -> None:
        if tid != 0 or src.transfer_sent:
            return
        records = []
        for key in src.sampled:
            rec = self._resident_record(key)
            if rec is not None:
                records.append(rec)
        conn = self._conn(src, 0)
        body = pack_transfer_ownership(TransferOwnership(src.mid, tuple(records)))
        src.stats["wire_bytes"] += conn.send(MSG_TRANSFER_OWNERSHIP, body, "transfer")
        src.transfer_sent = True

    def _resident_record(self, key: int) -> WireRecord | None:
        h = hash64(key)
        entry = self.store.index.find_entry(h)
        if entry is None:
            return None
        outcome, addr, view = self.store._walk_resident(entry.address, key, h)
        if outcome != "hit":
            return None
        return WireRecord(
            addr, RF_TOMBSTONE if view.is_tombstone else 0,
            key=key, value=view.value_bytes(),
        )

    def _enter_migrate_cut(self, src: _SourceState) -> None:
        if src.migrate_cut_requested:
            return
        src.migrate_cut_requested = True

        def enter_migrate():
            if src.aborted:
                return
            n = self.server.config.threads
            buckets = self.store.index.bucket_count
            for t in range(n):
                lo = t * buckets // n
                hi = (t + 1) * buckets // n
                src.regions[t] = (lo, hi)
                src.cursor[t] = lo
            src.disk_reads_at_migrate = self.store.log.local_disk_reads.value
            src.phase = MIGRATE

        self.store.epochs.bump_with_action(enter_migrate)

    # -- source: the Migrate phase ------------------------------------------------------

    def _step_migrate(self, src: _SourceState, tid: int) -> None:
        if tid in src.regions and tid not in src.region_done:
            self._migrate_region_step(src, tid)
        if tid != 0:
            return
        if len(src.region_done) < len(src.regions):
            return
        if src.mode == MODE_SCAN_LOG and not src.scan_done:
            self._scan_log_pass(src)
            return
        if src.pushes_acked < src.pushes_sent or src.complete_sent:
            return
        src.stats["migrate_local_disk_reads"] = (
            self.store.log.local_disk_reads.value - src.disk_reads_at_migrate
        )
        self.metadata.set_flag(src.mid, "source_done")
        conn = self._conn(src, 0)
        src.stats["wire_bytes"] += conn.send(
            MSG_COMPLETE_MIGRATION, pack_migration_id(src.mid), "complete"
        )
        src.complete_sent = True

    def _migrate_region_step(self, src: _SourceState, tid: int) -> None:
        lo, hi = src.regions[tid]
        bucket = src.cursor[tid]
        budget = self.config.batch_record_limit
        groups: list[tuple] = []
        scanned = 0
        while bucket < hi and budget > 0 and scanned < self.config.buckets_per_step:
            for _, word in self.store.index.chain_entries(bucket):
                group = self._walk_chain_for_push(src, bucket, word)
                if group:
                    groups.append(tuple(group))
                    budget -= len(group)
            bucket += 1
            scanned += 1
        src.cursor[tid] = bucket
        if groups:
            self._send_push(src, tid, PUSH_BULK, groups)
        if bucket >= hi:
            src.region_done.add(tid)

    def _walk_chain_for_push(self, src: _SourceState, bucket: int, word: int) -> list[WireRecord]:
        """Serialize one chain's migrating content, newest first.

        In-memory records ship by value (newest version per key only);
        where the chain leaves memory, indirection mode ships one stand-in
        per migrating range the chain may hold, pointing at the untraversed
        disk suffix on the shared tier.
        """
        log = self.store.log
        tag = entry_tag(word)
        addr = entry_address(word)
        group: list[WireRecord] = []
        emitted: set[int] = set()
        while addr != NULL_ADDRESS and addr >= log.head_offset:
            view = log.try_read_resident(addr)
            if view is None:
                break  # evicted while walking; treat as the disk suffix
            if view.is_indirection:
                next_addr, ind_log, ind_lo, ind_hi = view.indirection()
                if not (view.flags & FLAG_INVALID):
                    for r in src.ranges:
                        clipped = intersect(r, HashRange(ind_lo, ind_hi))
                        if clipped is not None:
                            group.append(WireRecord(
                                addr, RF_INDIRECTION, bucket=bucket, tag=tag,
                                ind_log_id=ind_log, next_address=next_addr,
                                range=clipped,
                            ))
                            src.stats["indirections_sent"] += 1
                addr = view.previous_address
                continue
            key = view.key
            if not (view.flags & FLAG_INVALID) and key not in emitted:
                h = hash64(key)
                if any(r.contains(h) for r in src.ranges):
                    group.append(WireRecord(
                        addr, RF_TOMBSTONE if view.is_tombstone else 0,
                        key=key, value=view.value_bytes(),
                    ))
                    emitted.add(key)
                    src.stats["records_pushed"] += 1
            addr = view.previous_address
        if addr != NULL_ADDRESS and src.mode == MODE_INDIRECTION:
            wanted = [r for r in src.ranges if chain_may_hold(tag, r)]
            if wanted:
                if addr >= log.shared_boundary:
                    page_end = addr - (addr % log.page_size) + log.page_size
                    log.flush_to_shared(min(page_end, log.head_offset))
                for r in wanted:
                    group.append(WireRecord(
                        addr, RF_INDIRECTION, bucket=bucket, tag=tag,
                        ind_log_id=self.store.config.log_id, next_address=addr,
                        range=r,
                    ))
                    src.stats["indirections_sent"] += 1
        return group

    def _scan_log_pass(self, src: _SourceState) -> None:
        """Sequential-scan baseline: one pass over the on-disk log region,
        shipping the newest on-disk version of every migrating key that has
        no memory-resident version (those already went in the bulk pass)."""
        log = self.store.log
        winners: dict[int, tuple[int, bytes, bool]] = {}
        for addr, view in log.scan_records(log.local_begin, log.head_offset):
            if view.is_indirection or (view.flags & FLAG_INVALID):
                continue
            key = view.key
            h = hash64(key)
            if not any(r.contains(h) for r in src.ranges):
                continue
            prev = winners.get(key)
            if prev is None or addr > prev[0]:
                winners[key] = (addr, view.value_bytes(), view.is_tombstone)
        groups = []
        for key, (addr, value, tomb) in winners.items():
            h = hash64(key)
            entry = self.store.index.find_entry(h)
            if entry is not None:
                outcome, _, _ = self.store._walk_resident(entry.address, key, h)
                if outcome == "hit":
                    continue  # a newer resident version was already shipped
            groups.append((WireRecord(
                addr, RF_TOMBSTONE if tomb else 0, key=key, value=value
            ),))
            src.stats["records_pushed"] += 1
            if len(groups) >= self.config.batch_record_limit:
                self._send_push(src, 0, PUSH_SCAN, groups)
                groups = []
        if groups:
            self._send_push(src, 0, PUSH_SCAN, groups)
        src.scan_done = True

    def _send_push(self, src: _SourceState, tid: int, kind: int, groups) -> None:
        conn = self._conn(src, tid)
        body = pack_push_records(PushRecords(
            src.mid, kind, self.store.config.log_id, tuple(groups)
        ))
        src.stats["wire_bytes"] += conn.send(MSG_PUSH_RECORDS, body, "push")
        src.pushes_sent += 1

    def _finish_source(self, src: _SourceState) -> None:
        src.stats["shared_bytes"] = max(
            0, self.store.log.shared_boundary - src.shared_boundary_at_start
        )
        src.stats["bytes_transmitted"] = src.stats["wire_bytes"] + src.stats["shared_bytes"]
        src.stats["completed_at"] = time.monotonic()
        src.phase = COMPLETE
        self.last_source_stats = src.stats
        for conn in src.conns.values():
            conn.transport.close()
        self.source = None
        logger.info(
            "migration %d complete: %d records, %d indirections, %d bytes out",
            src.mid, src.stats["records_pushed"], src.stats["indirections_sent"],
            src.stats["bytes_transmitted"],
        )

    def _abort_source(self, src: _SourceState, reason: str) -> None:
        """Target refused or failed mid-protocol: unwind ownership."""
        logger.error("migration %d aborted: %s", src.mid, reason)
        src.aborted = True
        self.store.op_observer = None
        try:
            self.metadata.set_flag(src.mid, "cancelled")
            self.metadata.revert_ranges(src.mid)
        except (UsageError, ProtocolError) as exc:
            logger.error("migration %d: revert failed: %s", src.mid, exc)
        newer = self.metadata.poll_changes(self.server.views.latest().map_version)
        if newer is not None:
            self.server.install_map(newer)
        self.server.hold_view_refresh = False
        for conn in src.conns.values():
            conn.transport.close()
        src.stats["aborted"] = reason
        self.last_source_stats = src.stats
        self.source = None

    # -- cancellation ---------------------------------------------------------------------

    def _on_cancel(self, conn, migration_id: int) -> None:
        tgt = self.target
        if tgt is not None and tgt.mid == migration_id:
            self._cancel_target(conn, tgt)
            return
        src = self.source
        if src is None or src.mid != migration_id:
            self._err(conn, ERR_UNKNOWN_ID, f"no active migration {migration_id}")
            return
        self._cancel_source(conn, src)

    def _cancel_source(self, conn, src: _SourceState) -> None:
        try:
            self.metadata.set_flag(src.mid, "cancelled")
            self.metadata.revert_ranges(src.mid)
        except (UsageError, ProtocolError) as exc:
            self._err(conn, ERR_REJECTED, f"cannot cancel: {exc}")
            return
        src.aborted = True
        self.store.op_observer = None
        newer = self.metadata.poll_changes(self.server.views.latest().map_version)
        if newer is not None:
            self.server.install_map(newer)
        self.server.hold_view_refresh = False
        if src.prep_sent:
            # requests for the ranges must wait until the target returns
            # its own writes, or those writes would be shadowed
            ranges = src.ranges
            self.server.request_gate = lambda key, _r=ranges: any(
                r.contains(hash64(key)) for r in _r
            )
            src.phase = CANCELLING
            peer = self._conn(src, 0)
            src.stats["wire_bytes"] += peer.send(
                MSG_CANCEL_MIGRATION, pack_migration_id(src.mid)
            )
        else:
            self._finish_cancel(src)
        logger.info("migration %d cancelled at the source", src.mid)
        self._ok(conn, src.mid)

    def _finish_cancel(self, src: _SourceState) -> None:
        self.server.request_gate = None
        src.stats["cancelled"] = True
        self.last_source_stats = src.stats
        for c in src.conns.values():
            c.transport.close()
        self.source = None

    def _cancel_target(self, conn, tgt: _TargetState) -> None:
        ranges = tgt.ranges
        self.server.request_gate = lambda key, _r=ranges: any(
            r.contains(hash64(key)) for r in _r
        )
        # stand-ins installed for this migration must never be followed again
        for addr in tgt.installed_indirections:
            self._invalidate_indirection(addr)
        self.foreign.indirections = {
            k: v for k, v in self.foreign.indirections.items()
            if v not in set(tgt.installed_indirections)
        }
        # return this server's own accepted writes for the ranges; before
        # the ownership handoff nothing executed, so there is nothing to send
        groups = []
        if tgt.phase == TARGET_RECEIVE:
            log = self.store.log
            winners: dict[int, tuple[int, bytes, bool]] = {}
            for addr, view in log.scan_records(
                tgt.tail_at_receive, log.tail_offset, count_read=False
            ):
                if view.is_indirection or (view.flags & (FLAG_INVALID | FLAG_MIGRATED)):
                    continue
                key = view.key
                h = hash64(key)
                if not any(r.contains(h) for r in ranges):
                    continue
                prev = winners.get(key)
                if prev is None or addr > prev[0]:
                    winners[key] = (addr, view.value_bytes(), view.is_tombstone)
            for key, (addr, value, tomb) in winners.items():
                groups.append((WireRecord(
                    addr, RF_TOMBSTONE if tomb else 0, key=key, value=value
                ),))
        if groups:
            conn.transport.send_bytes(encode_frame(MSG_PUSH_RECORDS, pack_push_records(
                PushRecords(tgt.mid, PUSH_BACK, self.store.config.log_id, tuple(groups))
            )))
        # registry entries for the ranges are void: the keys live at the
        # source again
        self.foreign.registry = {
            k: v for k, v in self.foreign.registry.items()
            if not any(r.contains(hash64(k)) for r in ranges)
        }
        self.received_ranges = list(
            subtract_ranges(tuple(self.received_ranges), ranges)
        )
        newer = self.metadata.poll_changes(self.server.views.latest().map_version)
        if newer is not None:
            self.server.install_map(newer)
        # deferred requests for the ranges go back to their clients, which
        # re-route to the reverted owner
        self.server.cancel_deferred(
            lambda key, _r=ranges: any(r.contains(hash64(key)) for r in _r)
        )
        self.server.request_gate = None
        tgt.stats["cancelled"] = True
        tgt.stats["pushed_back"] = len(groups)
        self.last_target_stats = tgt.stats
        self.target = None
        conn.transport.send_bytes(encode_frame(MSG_CANCEL_COMPLETE, pack_migration_id(tgt.mid)))
        logger.info("migration %d cancelled at the target; %d records returned", tgt.mid, len(groups))

    def _invalidate_indirection(self, addr: int) -> None:
        log = self.store.log
        view = log.try_read_resident(addr)
        if view is None:
            logger.warning(
                "indirection at %#x already evicted; it will keep resolving "
                "until compaction rewrites the chain", addr,
            )
            return
        view.update_flags(set_flags=FLAG_INVALID)

    # -- target side -------------------------------------------------------------------

    def _on_prep(self, conn, p: PrepForTransfer) -> None:
        if p.bucket_count != self.store.index.bucket_count:
            self._err(
                conn, ERR_REJECTED,
                f"index geometry mismatch: peer has {p.bucket_count} buckets, "
                f"this server has {self.store.index.bucket_count}",
            )
            return
        with self._lock:
            if self.target is not None:
                self._err(conn, ERR_REJECTED, "already receiving a migration")
                return
            if self.fetcher is None:
                self._err(conn, ERR_REJECTED, "no shared tier configured; cannot receive")
                return
            tgt = _TargetState(p.migration_id, p.source_id, p.source_log_id, tuple(p.ranges))
            ranges = tgt.ranges
            self.server.request_gate = lambda key, _r=ranges: any(
                r.contains(hash64(key)) for r in _r
            )
            self.target = tgt
        logger.info(
            "migration %d: receiving %d range(s) from server %d",
            p.migration_id, len(p.ranges), p.source_id,
        )
        self._ok(conn, p.migration_id)

    def _on_transfer(self, conn, t: TransferOwnership) -> None:
        tgt = self.target
        if tgt is None or tgt.mid != t.migration_id:
            self._err(conn, ERR_UNKNOWN_ID, f"no prepared migration {t.migration_id}")
            return
        tgt.tail_at_receive = self.store.log.tail_offset
        installed = 0
        for rec in t.records:
            if self._install_record(tgt, rec):
                installed += 1
        tgt.phase = TARGET_RECEIVE
        tgt.stats["transfer_received_at"] = time.monotonic()
        # ownership is here: gated requests may now execute
        self.received_ranges.extend(tgt.ranges)
        self.server.release_warming(tgt.ranges)
        self.server.request_gate = None
        self._ok(conn, installed)

    def _on_push(self, conn, push: PushRecords) -> None:
        if push.kind in (PUSH_BULK, PUSH_SCAN):
            tgt = self.target
            if tgt is None or tgt.mid != push.migration_id:
                self._err(conn, ERR_UNKNOWN_ID, f"no active migration {push.migration_id}")
                return
            now = time.monotonic()
            if tgt.stats["first_bulk_at"] is None:
                tgt.stats["first_bulk_at"] = now
            installed = 0
            for group in push.groups:
                # groups arrive newest-first; install bottom-up so each
                # append lands above the chain content below it
                for rec in reversed(group):
                    if not rec.is_indirection:
                        tgt.bulk_key_arrivals.setdefault(rec.key, now)
                    if self._install_record(tgt, rec):
                        installed += 1
            self._ok(conn, installed)
            return
        if push.kind == PUSH_FORWARD:
            self._on_forward(conn, push)
            return
        self._err(conn, ERR_BAD_MESSAGE, f"unexpected push kind {push.kind}")

    def _install_record(self, tgt: _TargetState, rec: WireRecord) -> bool:
        if rec.is_indirection:
            dedupe = (rec.ind_log_id, rec.next_address)
            if dedupe in self.foreign.indirections:
                return False
            addr = None
            for _ in range(1000):
                try:
                    addr = self.store.install_indirection(
                        rec.bucket, rec.tag, rec.ind_log_id, rec.next_address,
                        rec.range.lo, rec.range.hi,
                    )
                except Backpressure:
                    self.store.refresh()
                    time.sleep(0.0002)
                    continue
                if addr is not None:
                    break
                self.store.refresh()
            if addr is None:
                raise ProtocolError("indirection install kept losing entry races")
            self.foreign.indirections[dedupe] = addr
            tgt.installed_indirections.append(addr)
            tgt.stats["indirections_installed"] += 1
            return True
        landed = self._guarded_ingest(
            rec.key, rec.value, rec.is_tombstone, tgt.source_log_id,
            rec.source_address,
        )
        tgt.stats["records_installed" if landed else "records_skipped"] += 1
        return landed

    def _guarded_ingest(self, key, value, tombstone, src_log, src_addr) -> bool:
        """Idempotent newest-wins insert of a peer-shipped record.

        The registry remembers the newest shipped version per key; a local
        version of a key the registry has never seen must be a native write
        (it postdates the ownership flip), which outranks every shipped one
        forever after.
        """
        prev = self.foreign.registry.get(key)
        if prev is not None:
            if prev == NATIVE_WINS:
                return False
            if prev[0] == src_log and prev[1] >= src_addr:
                return False
            landed = self._ingest_retry(
                key, value, tombstone, FLAG_MIGRATED, only_if_absent=False
            )
        else:
            landed = self._ingest_retry(
                key, value, tombstone, FLAG_MIGRATED, only_if_absent=True
            )
            if not landed:
                self.foreign.registry[key] = NATIVE_WINS
                return False
        self.foreign.registry[key] = (src_log, src_addr)
        return landed

    def _on_complete(self, conn, migration_id: int) -> None:
        tgt = self.target
        if tgt is None or tgt.mid != migration_id:
            self._err(conn, ERR_UNKNOWN_ID, f"no active migration {migration_id}")
            return
        self.metadata.set_flag(migration_id, "target_done")
        self.last_target_stats = tgt.stats
        self.target = None
        logger.info(
            "migration %d: target side complete (%d records, %d stand-ins)",
            migration_id, tgt.stats["records_installed"],
            tgt.stats["indirections_installed"],
        )
        self._ok(conn, migration_id)

    # -- compaction --------------------------------------------------------------------

    def compact(self, up_to: int | None = None) -> dict:
        """Compact the local log below ``up_to``: re-append live owned
        records, forward live records of ranges owned elsewhere, notify
        peers so dangling stand-ins into the region retire, then drop the
        local pages (the shared tier keeps the bytes for old references).
        Runs on the calling thread, which must be registered and protected.
        """
        log = self.store.log
        if up_to is None:
            up_to = log.head_offset
        up_to = min(up_to, log.head_offset)
        up_to -= up_to % log.page_size
        if up_to <= self.compacted_to:
            return {"scanned": 0, "relocated": 0, "forwarded": 0, "discarded": 0}
        log.flush_to_shared(up_to)
        owner_map = self.server.views.latest()
        me = self.server.server_id
        winners: dict[int, tuple[int, bytes, bool]] = {}
        scanned = 0
        for addr, view in log.scan_records(self.compacted_to, up_to, count_read=False):
            scanned += 1
            if view.is_indirection or (view.flags & FLAG_INVALID):
                continue
            key = view.key
            prev = winners.get(key)
            if prev is None or addr > prev[0]:
                winners[key] = (addr, view.value_bytes(), view.is_tombstone)
        relocated = forwarded = discarded = 0
        forwards: dict[int, list] = {}
        for key, (addr, value, tomb) in winners.items():
            chain = self.store.collect_chain(key)
            if not chain or chain[0][0] != addr:
                discarded += 1  # a newer version exists above this one
                continue
            if self.store.lookup_path_crosses_indirection(key):
                # a live stand-in shadows this record: the authoritative
                # version lives in a peer log, so this copy must not be
                # re-appended above it
                discarded += 1
                continue
            h = hash64(key)
            owner, _ = owner_map.owner_of(h)
            if owner == me:
                if not tomb:
                    # only-if-absent: a client write racing ahead of the
                    # relocation is newer and must not be shadowed
                    self._ingest_retry(key, value, False, 0, only_if_absent=True)
                    relocated += 1
                else:
                    discarded += 1  # a deleted key's history can vanish
            else:
                forwards.setdefault(owner, []).append((WireRecord(
                    addr, RF_TOMBSTONE if tomb else 0, key=key, value=value
                ),))
                forwarded += 1
        for owner, groups in forwards.items():
            self._send_to_peer(owner, MSG_PUSH_RECORDS, pack_push_records(PushRecords(
                0, PUSH_FORWARD, self.store.config.log_id, tuple(groups)
            )))
        self._notify_compaction(owner_map, up_to)
        log.drop_local_to(up_to)
        self.compacted_to = up_to
        stats = {
            "scanned": scanned, "relocated": relocated,
            "forwarded": forwarded, "discarded": discarded, "up_to": up_to,
        }
        self.compaction_stats = stats
        logger.info("compaction to %#x: %s", up_to, stats)
        return stats

    def _send_to_peer(self, server_id: int, kind: int, body: bytes) -> None:
        """One-shot request/ack exchange with another server."""
        transport = self.dialer(server_id, "")
        transport.send_bytes(encode_frame(kind, body))
        deadline = time.monotonic() + 10
        try:
            while True:
                for reply_kind, reply_body in transport.poll():
                    if reply_kind == MSG_CTL_OK:
                        return
                    if reply_kind == MSG_CTL_ERR:
                        code, message = parse_ctl_err(bytes(reply_body))
                        raise UsageError(f"peer {server_id} rejected ({code}): {message}")
                    raise ProtocolError(f"unexpected reply kind {reply_kind:#x}")
                if time.monotonic() > deadline:
                    raise TimeoutError(f"peer {server_id} never acknowledged")
                time.sleep(0.0005)
        finally:
            transport.close()

    def _notify_compaction(self, owner_map, up_to: int) -> None:
        body = pack_compaction_notice(CompactionNotice(self.store.config.log_id, up_to))
        for server_id in owner_map.views:
            if server_id == self.server.server_id:
                continue
            try:
                self._send_to_peer(server_id, MSG_COMPACTION_NOTICE, body)
            except (OSError, TimeoutError, UsageError, ProtocolError) as exc:
                logger.warning("compaction notice to server %d failed: %s", server_id, exc)

    def _on_forward(self, conn, push: PushRecords) -> None:
        """Compaction handed us records for ranges we now own; keep one iff
        our lookup path for its key still crosses a covering indirection."""
        inserted = 0
        for group in push.groups:
            for rec in group:
                if rec.is_indirection:
                    continue
                keep = self.store.lookup_path_crosses_indirection(rec.key)
                landed = False
                if keep:
                    landed = self._guarded_ingest(
                        rec.key, rec.value, rec.is_tombstone,
                        push.sender_log_id, rec.source_address,
                    )
                self.forward_decisions.append((rec.key, landed))
                if landed:
                    inserted += 1
        self._ok(conn, inserted)

    def _on_compaction_notice(self, conn, notice: CompactionNotice) -> None:
        """Records below the notice boundary are gone from the peer's log;
        every stand-in pointing there must retire."""
        retired = 0
        for (log_id, next_addr), rec_addr in list(self.foreign.indirections.items()):
            if log_id == notice.log_id and next_addr < notice.up_to:
                self._invalidate_indirection(rec_addr)
                del self.foreign.indirections[(log_id, next_addr)]
                retired += 1
        logger.info(
            "compaction notice for log %d below %#x: retired %d stand-in(s)",
            notice.log_id, notice.up_to, retired,
        )
        self._ok(conn, retired)

    def close(self) -> None:
        if self.fetcher is not None:
            self.fetcher.close()
