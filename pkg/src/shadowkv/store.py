"""Single-node store semantics: read, upsert, read-modify-write.

Every key maps through ``hash64`` to a (bucket, tag) index entry whose
address heads a chain of records. Two keys may collide on both bucket and
tag, so every chain step compares the full key; an entry's chain therefore
holds every version of every key with that hash, newest first.

Concurrency contract
--------------------
Reads walk chains lock-free under epoch protection (a protected thread can
never observe a reclaimed page). Mutations serialize per key on a lock
stripe chosen by the key's hash and revalidate the index entry inside the
critical section, so an in-place update can never race a copy-to-tail of
the same key; that pair is the classic lost-update hazard. CPython has no
sub-word compare-and-swap, so the per-record spin bit a native build would
use is rendered as this stripe table; contention scope is the same (keys in
one stripe serialize) and the record-header lock bit stays reserved.

Region rules: a record at or above the read-only offset this thread cached
at its last epoch refresh may be written in place, because no flush can
cover that address until this thread refreshes again. Anything colder is
copied to the tail and the entry swung by compare-and-swap. Records below
the head offset need I/O: read and rmw become pending operations completed
on the issuing thread, while upsert stays blind and just appends.
"""

from __future__ import annotations

import logging
import threading
from collections import OrderedDict, deque
from dataclasses import dataclass, field
from typing import Callable, Optional

from ._hash import hash64, tag_of
from ._util import Counter
from .epochs import EpochManager
from .errors import Backpressure, ProtocolError, TransientConflict, UsageError
from .hash_index import EntryHandle, HashIndex, entry_address, pack_entry
from .hybrid_log import NULL_ADDRESS, AsyncTicket, HybridLog, LogConfig, Region
from .records import (
    FLAG_INDIRECTION,
    FLAG_INVALID,
    FLAG_MIGRATED,
    FLAG_TOMBSTONE,
    KEY_STRUCT,
    RecordView,
    pack_indirection_value,
    pack_record,
)
from .shared_tier import SharedLogWriter

logger = logging.getLogger(__name__)

# Operation result statuses; the wire protocol reuses these numbers.
OK = 0
NOT_FOUND = 1
PENDING = 2

_MUTATION_STRIPES = 128

# Modifier for read-modify-write: bytes (current value) or None (absent).
Modifier = Callable[[Optional[bytes]], bytes]


@dataclass
class StoreConfig:
    memory_budget: int = 64 * 1024 * 1024  # in-memory log budget, bytes
    mutable_fraction: float = 0.9
    bucket_count: int = 1 << 16
    value_bound: int = 1024  # largest accepted value, bytes
    page_size: int = 4 * 1024 * 1024
    data_dir: str = ""
    log_id: int = 0
    io_threads: int = 4
    rmw_retry_limit: int = 64  # entry CAS attempts before transient-conflict
    pending_warn: int = 1 << 16  # per-thread pending high-water warning
    poison_on_reclaim: bool = False
    index_overflow_limit: int | None = None

    def __post_init__(self):
        if self.memory_budget < 2 * self.page_size:
            raise UsageError("memory budget must cover at least two pages")
        if self.value_bound <= 0 or self.value_bound > self.page_size - 32:
            raise UsageError("value bound must fit a page with record overhead")
        if self.rmw_retry_limit < 1:
            raise UsageError("rmw_retry_limit must be >= 1")

    def log_config(self) -> LogConfig:
        return LogConfig(
            page_size=self.page_size,
            page_count=max(2, self.memory_budget // self.page_size),
            mutable_fraction=self.mutable_fraction,
            data_dir=self.data_dir,
            log_id=self.log_id,
            io_threads=self.io_threads,
            poison_on_reclaim=self.poison_on_reclaim,
        )


@dataclass
class PendingOperation:
    """One read or rmw waiting on record I/O.

    ``verified`` accumulates chain addresses whose records were examined and
    did not hold the key; together with ``match_address`` it lets an rmw
    completion prove its fetched base is still the key's newest version even
    after the chain grew and partially left memory.
    """

    kind: str  # "read" | "rmw"
    key: int
    key_hash: int  # hash64(key); indirection guards cover hash ranges
    operand: Modifier | None
    session: tuple[int, int] | None  # (session id, sequence) or None
    seq: int  # per-thread issue number; completions deliver in this order
    awaited_address: int
    entry_word: int  # index entry word snapshot at issue time
    source_log: int | None = None  # non-None: fetch from a foreign log
    via: tuple[int, int, int, int] | None = None  # indirection being followed
    retries: int = 0  # I/O hops + refetches
    verified: set = field(default_factory=set)
    match_address: int | None = None
    carried_base: bytes | None = None  # fetched rmw base parked across a refetch
    carried_set: bool = False  # distinguishes a parked None (absent) from no park
    result: tuple | None = None  # (status, value | None) once finished


class Store:
    """Shared store; any registered thread may call any operation while
    epoch-protected. Pending completions surface only on the issuing thread.
    """

    def __init__(
        self,
        config: StoreConfig,
        epochs: EpochManager | None = None,
        shared_writer: SharedLogWriter | None = None,
        io_pool=None,
    ):
        self.config = config
        self.epochs = epochs or EpochManager()
        self.log = HybridLog(config.log_config(), self.epochs, shared_writer, io_pool)
        self.index = HashIndex(config.bucket_count, config.index_overflow_limit)
        self._mutation_locks = [threading.Lock() for _ in range(_MUTATION_STRIPES)]
        self._tls = threading.local()
        self._completions: dict[int, deque] = {}
        self._pending: dict[int, OrderedDict[int, PendingOperation]] = {}
        self._pending_seq: dict[int, int] = {}

        self.reads = Counter()
        self.upserts = Counter()
        self.rmws = Counter()
        self.in_place_updates = Counter()
        self.rcu_appends = Counter()
        self.cas_conflicts = Counter()
        self.pendings_issued = Counter()
        self.pendings_completed = Counter()
        self.pending_high_water = 0  # metric only; racy updates acceptable

        # Hooks installed by the migration layer.
        self.op_observer: Callable[[int, str], None] | None = None
        self.foreign_reader = None  # (log_id, address, queue, ctx) -> ticket
        # Called when a read resolved through a foreign log: (key, view|None,
        # log_id, address). A None view means the foreign chain ended without
        # a version of the key. Lets the owner copy the record into its own
        # log so later accesses stay local.
        self.foreign_record_sink = None

    # -- thread lifecycle ----------------------------------------------------

    def register_thread(self) -> int:
        tid = self.epochs.register_thread()
        self._tls.tid = tid
        self._completions[tid] = deque()
        self._pending[tid] = OrderedDict()
        self._pending_seq[tid] = 0
        self.log.refresh_thread_cache(tid)
        return tid

    def unregister_thread(self) -> None:
        tid = self._tid()
        if self._pending[tid]:
            logger.warning(
                "thread %d unregistered with %d pending ops; they are dropped",
                tid,
                len(self._pending[tid]),
            )
        self.epochs.unregister_thread(tid)
        self._tls.tid = None

    def protect(self) -> None:
        tid = self._tid()
        self.epochs.protect(tid)
        self.log.refresh_thread_cache(tid)

    refresh = protect  # same slot write; callers use it on batch boundaries

    def unprotect(self) -> None:
        self.epochs.unprotect(self._tid())

    def _tid(self) -> int:
        tid = getattr(self._tls, "tid", None)
        if tid is None:
            raise UsageError("thread is not registered with the store")
        return tid

    def _checked_tid(self) -> int:
        tid = self._tid()
        if not self.epochs.is_protected(tid):
            raise UsageError("operation requires epoch protection")
        return tid

    # -- chain walking ---------------------------------------------------------

    def _walk_resident(self, address: int, key: int, key_hash: int):
        """Follow a chain while it stays memory-resident.

        Returns one of
            ("hit", addr, view)          key's newest record, in memory
            ("indirection", addr, view)  a live indirection covering key
            ("disk", addr, None)         chain continues below head
            ("miss", 0, None)            chain ended; key absent

        Indirection guards are ranges of the hash space, so coverage is
        tested against the key's hash, never the key itself.
        """
        addr = address
        log = self.log
        while addr != NULL_ADDRESS:
            if addr < log.head_offset:
                return ("disk", addr, None)
            view = log.try_read_resident(addr)
            if view is None:  # eviction raced the head check
                return ("disk", addr, None)
            if view.is_indirection:
                if not (view.flags & FLAG_INVALID):
                    _, _, lo, hi = view.indirection()
                    if lo <= key_hash < hi:
                        return ("indirection", addr, view)
            elif not (view.flags & FLAG_INVALID) and view.key == key:
                return ("hit", addr, view)
            addr = view.previous_address
        return ("miss", NULL_ADDRESS, None)

    # -- operations --------------------------------------------------------------

    def read(self, key: int, session: tuple[int, int] | None = None):
        """(OK, value) | (NOT_FOUND, None) | (PENDING, op)."""
        tid = self._checked_tid()
        self.reads.inc()
        if self.op_observer is not None:
            self.op_observer(key, "read")
        h = hash64(key)
        entry = self.index.find_entry(h)
        if entry is None:
            return (NOT_FOUND, None)
        word = entry.load()
        outcome, addr, view = self._walk_resident(entry_address(word), key, h)
        if outcome == "hit":
            if view.is_tombstone:
                return (NOT_FOUND, None)
            return (OK, view.value_bytes())
        if outcome == "miss":
            return (NOT_FOUND, None)
        return (PENDING, self._issue_pending(
            tid, "read", key, h, None, session, addr, word, view
        ))

    def upsert(self, key: int, value: bytes, session: tuple[int, int] | None = None):
        """Blind write: in place when the newest version is mutable and the
        length matches, otherwise a tail append. Never waits on I/O."""
        tid = self._checked_tid()
        self._check_value(value)
        self.upserts.inc()
        if self.op_observer is not None:
            self.op_observer(key, "upsert")
        h = hash64(key)
        lock = self._mutation_locks[h & (_MUTATION_STRIPES - 1)]
        with lock:
            for _ in range(self.config.rmw_retry_limit):
                entry = self.index.find_or_create_entry(h)
                word = entry.load()
                head = entry_address(word)
                outcome, addr, view = self._walk_resident(head, key, h)
                if (
                    outcome == "hit"
                    and not view.is_tombstone
                    and len(value) == view.value_len
                    and self.log.classify(addr, tid) is Region.MUTABLE
                ):
                    if view.flags & FLAG_MIGRATED:
                        view.update_flags(clear_flags=FLAG_MIGRATED)
                    view.write_value(value)
                    self.in_place_updates.inc()
                    return (OK, None)
                # Append path covers read-only/fuzzy hits, misses, disk
                # chains (blind: no fetch), and live indirections.
                if self._append_and_swing(entry, word, h, key, value):
                    return (OK, None)
                self.cas_conflicts.inc()
        raise TransientConflict(f"upsert of key {key:#x} kept losing entry races")

    def rmw(self, key: int, modifier: Modifier, session: tuple[int, int] | None = None):
        """(OK, new_value) | (PENDING, op). Atomic against rmw/upsert peers."""
        tid = self._checked_tid()
        self.rmws.inc()
        if self.op_observer is not None:
            self.op_observer(key, "rmw")
        h = hash64(key)
        lock = self._mutation_locks[h & (_MUTATION_STRIPES - 1)]
        with lock:
            for _ in range(self.config.rmw_retry_limit):
                entry = self.index.find_or_create_entry(h)
                word = entry.load()
                outcome, addr, view = self._walk_resident(entry_address(word), key, h)
                if outcome == "hit":
                    done, new_value = self._apply_resident_rmw(
                        tid, entry, word, h, key, modifier, addr, view
                    )
                    if done:
                        return (OK, new_value)
                elif outcome == "miss":
                    new_value = modifier(None)
                    self._check_value(new_value)
                    if self._append_and_swing(entry, word, h, key, new_value):
                        return (OK, new_value)
                else:  # disk | indirection: base version needs I/O
                    return (PENDING, self._issue_pending(
                        tid, "rmw", key, h, modifier, session, addr, word, view
                    ))
                self.cas_conflicts.inc()
        raise TransientConflict(f"rmw of key {key:#x} kept losing entry races")

    def _apply_resident_rmw(self, tid, entry, word, h, key, modifier, addr, view):
        """Apply a modifier to a memory-resident newest version. Returns
        (True, new_value) on success, (False, None) on a lost entry race."""
        base = None if view.is_tombstone else view.value_bytes()
        new_value = modifier(base)
        self._check_value(new_value)
        if (
            base is not None
            and len(new_value) == len(base)
            and self.log.classify(addr, tid) is Region.MUTABLE
        ):
            if view.flags & FLAG_MIGRATED:
                view.update_flags(clear_flags=FLAG_MIGRATED)
            view.write_value(new_value)
            self.in_place_updates.inc()
            return (True, new_value)
        if self._append_and_swing(entry, word, h, key, new_value):
            return (True, new_value)
        return (False, None)

    def _check_value(self, value: bytes) -> None:
        if not isinstance(value, (bytes, bytearray)):
            raise UsageError("values must be bytes")
        if len(value) > self.config.value_bound:
            raise UsageError(
                f"value of {len(value)} bytes exceeds bound {self.config.value_bound}"
            )

    def _append_and_swing(
        self,
        entry: EntryHandle,
        expected_word: int,
        h: int,
        key: int,
        value: bytes,
        flags: int = 0,
    ) -> bool:
        """Append a new version whose prev is the current chain head, then
        compare-and-swap the entry. On a lost race the orphan is marked
        invalid (it was never reachable) and the caller retries."""
        prev = entry_address(expected_word)
        tag = tag_of(h)
        data = pack_record(prev, tag, KEY_STRUCT.pack(key), value, flags)
        addr = self.log.allocate(len(data))
        page = self.log.page_buffer(addr)
        off = addr - page.start
        page.buf[off : off + len(data)] = data
        if self.index.try_update_entry(entry, expected_word, pack_entry(tag, addr)):
            self.rcu_appends.inc()
            return True
        RecordView(page.buf, off).update_flags(set_flags=FLAG_INVALID)
        return False

    # -- pending operations ---------------------------------------------------------

    def _issue_pending(self, tid, kind, key, key_hash, operand, session, address, word, view):
        seq = self._pending_seq[tid]
        self._pending_seq[tid] = seq + 1
        op = PendingOperation(
            kind=kind,
            key=key,
            key_hash=key_hash,
            operand=operand,
            session=session,
            seq=seq,
            awaited_address=address,
            entry_word=word,
        )
        if view is not None and view.is_indirection:
            op.via = view.indirection()
            op.source_log = op.via[1]
            op.awaited_address = op.via[0]
        table = self._pending[tid]
        table[seq] = op
        self.pendings_issued.inc()
        depth = len(table)
        if depth > self.pending_high_water:
            self.pending_high_water = depth
            if depth == self.config.pending_warn:
                logger.warning("pending queue reached %d operations", depth)
        self._submit_fetch(op, tid)
        return op

    def _submit_fetch(self, op: PendingOperation, tid: int) -> None:
        queue = self._completions[tid]
        if op.source_log is None:
            result = self.log.read_record(op.awaited_address, queue, op)
            if isinstance(result, RecordView):
                # The address is still resident after all. Deliver through a
                # pre-completed ticket so the record is processed outside any
                # mutation lock the caller may hold.
                ticket = AsyncTicket(op.awaited_address, "local", queue, op)
                ticket.complete(result.record_bytes())
        else:
            if self.foreign_reader is None:
                raise ProtocolError(
                    "indirection record needs a foreign-log reader installed"
                )
            self.foreign_reader(op.source_log, op.awaited_address, queue, op)

    def complete_pending(self, max_ops: int | None = None) -> list[PendingOperation]:
        """Drain finished I/O for this thread, apply pending rmw, and return
        completed operations in issue order. Exactly-once: an op appears in
        the returned list of exactly one call."""
        tid = self._checked_tid()
        queue = self._completions[tid]
        while queue:
            ticket: AsyncTicket = queue.popleft()
            op: PendingOperation = ticket.context
            if ticket.error is not None:
                raise ticket.error
            try:
                self._advance_pending(op, RecordView(ticket.record, 0), tid)
            except Backpressure:
                # Ring full mid-apply: park the ticket and let the caller
                # refresh its epoch (freeing pages) before retrying.
                queue.appendleft(ticket)
                raise
        table = self._pending[tid]
        out: list[PendingOperation] = []
        while table:
            head_seq = next(iter(table))
            if table[head_seq].result is None:
                break
            out.append(table.pop(head_seq))
            self.pendings_completed.inc()
            if max_ops is not None and len(out) >= max_ops:
                break
        return out

    def pending_count(self) -> int:
        return len(self._pending[self._tid()])

    def _advance_pending(self, op: PendingOperation, view: RecordView, tid: int) -> None:
        """Process one fetched record: finish the op or hop down the chain."""
        if view.is_indirection and not (view.flags & FLAG_INVALID):
            via = view.indirection()
            if via[2] <= op.key_hash < via[3]:
                if via == op.via:
                    # Second arrival at the same splice. For an rmw that
                    # parked its base across a chain-growth refetch this is
                    # the expected rendezvous; anything else is a cycle.
                    if op.kind == "rmw" and op.carried_set:
                        self._finish_rmw_from_fetch(op, op.carried_base, tid)
                        return
                    raise ProtocolError(
                        f"indirection cycle for key {op.key:#x} via {via}"
                    )
                op.via = via
                op.source_log = via[1]
                op.awaited_address = via[0]
                op.retries += 1
                self._submit_fetch(op, tid)
                return
        elif not (view.flags & FLAG_INVALID) and view.key == op.key:
            op.match_address = op.awaited_address if op.source_log is None else None
            if op.source_log is not None and self.foreign_record_sink is not None:
                self.foreign_record_sink(
                    op.key, view, op.source_log, op.awaited_address
                )
            if op.kind == "read":
                if view.is_tombstone:
                    op.result = (NOT_FOUND, None)
                else:
                    op.result = (OK, view.value_bytes())
            else:
                base = None if view.is_tombstone else view.value_bytes()
                self._finish_rmw_from_fetch(op, base, tid)
            return
        prev = view.previous_address
        if prev == NULL_ADDRESS:
            if op.source_log is not None and self.foreign_record_sink is not None:
                self.foreign_record_sink(op.key, None, op.source_log, op.awaited_address)
            if op.kind == "read":
                op.result = (NOT_FOUND, None)
            else:
                self._finish_rmw_from_fetch(op, None, tid)
            return
        if op.source_log is None:
            op.verified.add(op.awaited_address)
        op.awaited_address = prev
        op.retries += 1
        self._submit_fetch(op, tid)

    def _finish_rmw_from_fetch(
        self, op: PendingOperation, base: bytes | None, tid: int
    ) -> None:
        """Apply a pending rmw whose base version was fetched from disk.

        The fetched base is definitive only while the key has no resident
        version and the chain did not grow past what this op has examined;
        both are checked under the key's mutation lock, and on evidence of
        unexamined growth the fetch is re-armed instead of applied.
        """
        h = hash64(op.key)
        lock = self._mutation_locks[h & (_MUTATION_STRIPES - 1)]
        with lock:
            for _ in range(self.config.rmw_retry_limit):
                entry = self.index.find_or_create_entry(h)
                word = entry.load()
                outcome, addr, view = self._walk_resident(entry_address(word), op.key, h)
                if outcome == "hit":
                    done, new_value = self._apply_resident_rmw(
                        tid, entry, word, h, op.key, op.operand, addr, view
                    )
                    if done:
                        op.result = (OK, new_value)
                        return
                    self.cas_conflicts.inc()
                    continue
                if outcome == "disk" and word != op.entry_word:
                    known = addr == op.match_address or addr in op.verified
                    if not known:
                        # The chain grew and the new records already left
                        # memory; they may hold our key. Walk them before
                        # trusting the fetched base, which rides along.
                        op.carried_base = base
                        op.carried_set = True
                        op.source_log = None
                        op.awaited_address = addr
                        op.retries += 1
                        self._submit_fetch(op, tid)
                        return
                if outcome == "indirection" and view.indirection() != op.via:
                    # The range was migrated (again) while we waited; the
                    # new splice owns the authoritative chain, so the old
                    # base is stale and must be discarded.
                    op.via = view.indirection()
                    op.source_log = op.via[1]
                    op.awaited_address = op.via[0]
                    op.carried_base = None
                    op.carried_set = False
                    op.retries += 1
                    self._submit_fetch(op, tid)
                    return
                new_value = op.operand(base)
                self._check_value(new_value)
                if self._append_and_swing(entry, word, h, op.key, new_value):
                    op.result = (OK, new_value)
                    return
                self.cas_conflicts.inc()
        raise TransientConflict(f"pending rmw of key {op.key:#x} kept losing races")

    # -- peer record handoff (migration, compaction, cancellation) ----------------

    def ingest(
        self,
        key: int,
        value: bytes,
        tombstone: bool = False,
        flags: int = 0,
        only_if_absent: bool = True,
    ) -> bool:
        """Append a record delivered by a peer server.

        With ``only_if_absent`` a memory-resident version of the key wins
        and the ingest is skipped: anything a client wrote here is newer
        than what a peer is shipping. Cancellation push-back forces the
        append instead, because returned records are by construction newer
        than this server's own copies. Returns True if a record landed.
        """
        tid = self._checked_tid()
        self._check_value(value)
        h = hash64(key)
        rec_flags = flags | (FLAG_TOMBSTONE if tombstone else 0)
        lock = self._mutation_locks[h & (_MUTATION_STRIPES - 1)]
        with lock:
            for _ in range(self.config.rmw_retry_limit):
                entry = self.index.find_or_create_entry(h)
                word = entry.load()
                outcome, _, _ = self._walk_resident(entry_address(word), key, h)
                if only_if_absent and outcome == "hit":
                    return False
                if self._append_and_swing(entry, word, h, key, value, rec_flags):
                    return True
                self.cas_conflicts.inc()
        raise TransientConflict(f"ingest of key {key:#x} kept losing entry races")

    def install_indirection(
        self, bucket: int, tag: int, log_id: int, next_address: int, lo: int, hi: int
    ) -> int | None:
        """Prepend an indirection stand-in to the chain at raw index
        coordinates, returning its address (None if the entry CAS kept
        losing). The coordinates come off the wire, so the chain is found
        by a synthesized hash rather than by any key."""
        self._checked_tid()
        h = ((tag & 0x3FFF) << 48) | (bucket & self.index.bucket_mask)
        payload = pack_indirection_value(next_address, log_id, lo, hi)
        lock = self._mutation_locks[h & (_MUTATION_STRIPES - 1)]
        with lock:
            for _ in range(self.config.rmw_retry_limit):
                entry = self.index.find_or_create_entry(h)
                word = entry.load()
                data = pack_record(
                    entry_address(word), tag_of(h), b"", payload, FLAG_INDIRECTION
                )
                addr = self.log.allocate(len(data))
                page = self.log.page_buffer(addr)
                off = addr - page.start
                page.buf[off : off + len(data)] = data
                if self.index.try_update_entry(entry, word, pack_entry(tag_of(h), addr)):
                    return addr
                RecordView(page.buf, off).update_flags(set_flags=FLAG_INVALID)
                self.cas_conflicts.inc()
        return None

    def refresh_to_tail(self, key: int, floor: int) -> bool:
        """Copy the key's resident newest version to the tail if it lives
        below ``floor``. The copy moves a record that is about to be handed
        off into the region that travels in memory; the address test makes
        a second access a no-op. Returns True if a copy happened."""
        tid = self._checked_tid()
        h = hash64(key)
        lock = self._mutation_locks[h & (_MUTATION_STRIPES - 1)]
        with lock:
            entry = self.index.find_entry(h)
            if entry is None:
                return False
            word = entry.load()
            outcome, addr, view = self._walk_resident(entry_address(word), key, h)
            if outcome != "hit" or addr >= floor:
                return False
            flags = FLAG_TOMBSTONE if view.is_tombstone else 0
            return self._append_and_swing(
                entry, word, h, key, view.value_bytes(), flags
            )

    def lookup_path_crosses_indirection(self, key: int) -> bool:
        """Whether a lookup of ``key`` would reach a covering indirection
        before any version of the key. Blocks on I/O to walk the full
        chain; used by the compaction-forward ingest decision, never on a
        request path."""
        h = hash64(key)
        entry = self.index.find_entry(h)
        if entry is None:
            return False
        addr = entry.address
        while addr != NULL_ADDRESS:
            got = self.log.read_record(addr)
            view = got if isinstance(got, RecordView) else RecordView(got.wait(), 0)
            if view.is_indirection:
                if not (view.flags & FLAG_INVALID):
                    _, _, lo, hi = view.indirection()
                    if lo <= h < hi:
                        return True
            elif not (view.flags & FLAG_INVALID) and view.key == key:
                return False
            addr = view.previous_address
        return False

    # -- audits (tests, migration bookkeeping) -----------------------------------

    def collect_chain(self, key: int, include_invalid: bool = False):
        """Synchronously walk the key's whole local chain across all tiers.

        Returns [(address, RecordView)] newest first, skipping records of
        other keys sharing the chain. Blocks on I/O; not for request paths.
        """
        entry = self.index.find_entry(hash64(key))
        if entry is None:
            return []
        out = []
        addr = entry.address
        while addr != NULL_ADDRESS:
            got = self.log.read_record(addr)
            view = got if isinstance(got, RecordView) else RecordView(got.wait(), 0)
            if view.is_indirection:
                addr = view.previous_address
                continue
            if view.key == key and (include_invalid or not (view.flags & FLAG_INVALID)):
                out.append((addr, view))
            addr = view.previous_address
        return out

    def stats(self) -> dict:
        return {
            "reads": self.reads.value,
            "upserts": self.upserts.value,
            "rmws": self.rmws.value,
            "in_place_updates": self.in_place_updates.value,
            "rcu_appends": self.rcu_appends.value,
            "cas_conflicts": self.cas_conflicts.value,
            "pendings_issued": self.pendings_issued.value,
            "pendings_completed": self.pendings_completed.value,
            "pending_high_water": self.pending_high_water,
            "local_disk_reads": self.log.local_disk_reads.value,
            "backpressure_events": self.log.backpressure_events.value,
        }

    def close(self) -> None:
        self.log.close()
