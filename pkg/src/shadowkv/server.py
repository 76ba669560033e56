"""Server dispatch: per-thread connection polling and batch execution.

A ``ServerProcess`` runs N dispatch threads over one shared store. Each
connection belongs to exactly one thread for its lifetime; neither requests
nor results ever cross threads. A batch is admitted by comparing its view
tag against the thread's adopted view — one integer comparison, with no
per-key ownership checks — and rejected batches carry the server's view so
the client can refresh and reshuffle.

Each loop iteration: accept new connections (thread 0 polls the listener
and shards accepts across threads), poll owned connections, process their
batches, drain pending-operation completions, run one unit of migration
work if any is scheduled, and refresh the thread's epoch.

Tests can drive a server deterministically by calling ``step(tid)`` from a
single thread; ``start()`` spawns the real dispatch threads.
"""

from __future__ import annotations

import logging
import socket
import struct
import threading
import time
from collections import deque

from ._hash import hash64
from .errors import Backpressure, ProtocolError, UsageError
from .sessions import TcpTransport
from .store import OK, PENDING, Store, StoreConfig
from .views import ThreadViews, subtract_ranges, validate_view
from .wire import (
    BATCH_OK,
    BATCH_VIEW_REJECTED,
    COMPLETION_ONLY_SEQ,
    MSG_REQUEST_BATCH,
    MSG_RESPONSE_BATCH,
    OP_ADD,
    OP_READ,
    OP_UPSERT,
    ST_NOT_FOUND,
    ST_OK,
    ST_PENDING,
    ST_REISSUE,
    Completion,
    Result,
    encode_frame,
    pack_response_batch,
    parse_request_batch,
)

logger = logging.getLogger(__name__)

M64 = 0xFFFFFFFFFFFFFFFF


def add64_modifier(operand: bytes):
    """rmw-add: 8-byte little-endian wrapping add, absent counts as 0."""
    delta = struct.unpack("<Q", operand)[0]

    def modifier(current: bytes | None) -> bytes:
        base = struct.unpack("<Q", current)[0] if current is not None else 0
        return struct.pack("<Q", (base + delta) & M64)

    return modifier


class Connection:
    """One client connection, owned by one dispatch thread."""

    __slots__ = (
        "conn_id", "transport", "thread_id", "owner_ident", "completions", "open"
    )

    def __init__(self, conn_id: int, transport, thread_id: int):
        self.conn_id = conn_id
        self.transport = transport
        self.thread_id = thread_id
        self.owner_ident: int | None = None  # OS thread that polls it
        self.completions: list[Completion] = []
        self.open = True


class ServerConfig:
    def __init__(
        self,
        server_id: int,
        store: StoreConfig,
        threads: int = 1,
        listen: tuple[str, int] | None = None,
        view_refresh_interval_s: float = 0.001,
    ):
        if threads < 1:
            raise UsageError("a server needs at least one dispatch thread")
        self.server_id = server_id
        self.store = store
        self.threads = threads
        self.listen = listen
        self.view_refresh_interval_s = view_refresh_interval_s


class ServerProcess:
    """N dispatch threads, one shared store, one adopted ownership view."""

    def __init__(self, config: ServerConfig, metadata, shared_writer=None):
        self.config = config
        self.server_id = config.server_id
        self.metadata = metadata
        self.store = Store(config.store, shared_writer=shared_writer)
        self.views = ThreadViews(self.store.epochs, metadata.get_ownership())
        n = config.threads
        self._conns: list[list[Connection]] = [[] for _ in range(n)]
        self._inbox: list[deque] = [deque() for _ in range(n)]
        self._conn_by_id: dict[int, Connection] = {}
        self._deferred: list[deque] = [deque() for _ in range(n)]
        self._thread_view: list[int] = [
            self.views.latest().views.get(self.server_id, 0)
        ] * n
        self._next_conn_id = 0
        self._conn_lock = threading.Lock()
        self._listener: socket.socket | None = None
        self._threads: list[threading.Thread] = []
        self._stop = threading.Event()
        self._last_view_refresh = 0.0

        # hooks installed by the migration runtime
        self.request_gate = None  # callable(key) -> bool: defer this request?
        self.control_handler = None  # callable(server, conn, kind, body, tid)
        self.migration_step = None  # callable(tid) -> bool: one unit of work
        # While a migration source samples and prepares it keeps serving
        # under the outgoing view, so mismatch-triggered refresh is held off.
        self.hold_view_refresh = False
        # Ranges this server gained in a map change whose data has not
        # arrived yet: requests for them pend rather than answer not-found.
        self.warming_ranges: tuple = ()
        self.gate_filter = None  # callable(gained) -> still-warming subset
        self.on_ranges_lost = None  # callable(lost ranges)

        # instrumentation
        self.view_checks = 0
        self.batches_ok = 0
        self.batches_rejected = 0
        self.ops_executed = 0
        self.cross_thread_violations = 0
        self.completions_sent = 0

    # -- connection plumbing ------------------------------------------------------

    def attach(self, transport, thread_id: int | None = None) -> Connection:
        """Register a connection (loopback or accepted socket)."""
        with self._conn_lock:
            conn_id = self._next_conn_id
            self._next_conn_id += 1
            tid = conn_id % self.config.threads if thread_id is None else thread_id
            conn = Connection(conn_id, transport, tid)
            self._conn_by_id[conn_id] = conn
            self._inbox[tid].append(conn)
            return conn

    def open_listener(self) -> tuple[str, int]:
        if self.config.listen is None:
            raise UsageError("server has no listen address configured")
        self._listener = socket.create_server(self.config.listen, backlog=128)
        self._listener.setblocking(False)
        return self._listener.getsockname()

    def _accept_new(self) -> None:
        while self._listener is not None:
            try:
                sock, _ = self._listener.accept()
            except (BlockingIOError, InterruptedError):
                return
            except OSError:
                return
            # shard by the connection's file descriptor across threads
            self.attach(TcpTransport(sock), sock.fileno() % self.config.threads)

    def _close_conn(self, conn: Connection) -> None:
        conn.open = False
        conn.transport.close()
        self._conn_by_id.pop(conn.conn_id, None)

    # -- the dispatch loop ---------------------------------------------------------

    def step(self, tid: int) -> int:
        """One run_loop iteration for thread ``tid``; returns batches seen."""
        if tid == 0:
            self._accept_new()
        conns = self._conns[tid]
        inbox = self._inbox[tid]
        while inbox:
            conns.append(inbox.popleft())

        adopted = self.views.adopt(tid)
        self._thread_view[tid] = adopted.views.get(self.server_id, 0)

        processed = 0
        for conn in conns:
            if not conn.open:
                continue
            ident = threading.get_ident()
            if conn.owner_ident is None:
                conn.owner_ident = ident
            elif conn.owner_ident != ident:
                self.cross_thread_violations += 1
            try:
                for kind, body in conn.transport.poll():
                    if kind == MSG_REQUEST_BATCH:
                        self.process_batch(conn, body, tid)
                        processed += 1
                    elif self.control_handler is not None:
                        self.control_handler(self, conn, kind, body, tid)
                    else:
                        raise ProtocolError(f"unexpected frame kind {kind:#x}")
            except ProtocolError as exc:
                logger.warning("closing connection %d: %s", conn.conn_id, exc)
                self._close_conn(conn)
            if not conn.transport.is_open:
                conn.open = False
        self._conns[tid] = [c for c in conns if c.open]

        self._run_deferred(tid)
        self._drain_completions(tid)
        if self.migration_step is not None:
            self.migration_step(tid)
        self.store.refresh()
        return processed

    def run_loop(self, tid: int) -> None:
        self.store.register_thread()
        self.store.protect()
        try:
            while not self._stop.is_set():
                if self.step(tid) == 0:
                    time.sleep(0.0002)
        finally:
            self.store.unprotect()
            self.store.unregister_thread()

    def start(self) -> None:
        if self.config.listen is not None and self._listener is None:
            self.open_listener()
        self._stop.clear()
        self._threads = [
            threading.Thread(
                target=self.run_loop, args=(tid,), name=f"dispatch-{tid}", daemon=True
            )
            for tid in range(self.config.threads)
        ]
        for t in self._threads:
            t.start()

    def stop(self) -> None:
        self._stop.set()
        for t in self._threads:
            t.join(timeout=10)
        self._threads = []

    def close(self) -> None:
        self.stop()
        if self._listener is not None:
            self._listener.close()
            self._listener = None
        for conn in list(self._conn_by_id.values()):
            self._close_conn(conn)
        self.store.close()

    # -- batch execution -----------------------------------------------------------

    def process_batch(self, conn: Connection, body, tid: int) -> None:
        batch = parse_request_batch(body)
        server_view = self._thread_view[tid]
        self.view_checks += 1
        if not validate_view(batch.view, server_view):
            self.batches_rejected += 1
            conn.transport.send_bytes(encode_frame(
                MSG_RESPONSE_BATCH,
                pack_response_batch(batch.batch_seq, BATCH_VIEW_REJECTED, server_view),
            ))
            self._maybe_refresh_view()
            return
        self.batches_ok += 1
        results = []
        for idx, req in enumerate(batch.requests):
            if self._should_defer(req.key):
                self._deferred[tid].append((conn, batch.batch_seq, idx, req))
                results.append(Result(ST_PENDING))
                continue
            results.append(self._execute(conn, req, batch.batch_seq, idx))
        conn.transport.send_bytes(encode_frame(
            MSG_RESPONSE_BATCH,
            pack_response_batch(batch.batch_seq, BATCH_OK, server_view, results),
        ))

    def _execute(self, conn: Connection, req, batch_seq: int, idx: int) -> Result:
        session = (conn.conn_id, batch_seq, idx)
        while True:
            try:
                if req.opcode == OP_READ:
                    status, out = self.store.read(req.key, session)
                elif req.opcode == OP_UPSERT:
                    status, out = self.store.upsert(req.key, req.value, session)
                elif req.opcode == OP_ADD:
                    status, out = self.store.rmw(
                        req.key, add64_modifier(req.value), session
                    )
                else:
                    raise ProtocolError(f"unknown opcode {req.opcode}")
                break
            except Backpressure:
                self.store.refresh()
                try:
                    self._drain_completions(conn.thread_id)
                except Backpressure:
                    pass
                time.sleep(0.0002)
        self.ops_executed += 1
        if status == PENDING:
            return Result(ST_PENDING)
        if status == OK:
            return Result(ST_OK, out if isinstance(out, bytes) else b"")
        return Result(ST_NOT_FOUND)

    def _should_defer(self, key: int) -> bool:
        """Whether a request must wait for in-flight data movement."""
        gate = self.request_gate
        if gate is not None and gate(key):
            return True
        if self.warming_ranges:
            h = hash64(key)
            return any(r.contains(h) for r in self.warming_ranges)
        return False

    def _run_deferred(self, tid: int) -> None:
        """Drain gate-deferred requests in FIFO order once ungated: execute
        the ones this server owns, bounce the rest for reissue (a cancelled
        migration can disown keys while their requests sit deferred);
        results travel as completion records."""
        dq = self._deferred[tid]
        mine = None
        while dq:
            conn, seq, idx, req = dq[0]
            if self._should_defer(req.key):
                break
            dq.popleft()
            if not conn.open:
                continue
            if mine is None:
                mine = self.views.adopted(tid).server_ranges(self.server_id)
            h = hash64(req.key)
            if not any(r.contains(h) for r in mine):
                conn.completions.append(Completion(seq, idx, ST_REISSUE))
                continue
            result = self._execute(conn, req, seq, idx)
            if result.status != ST_PENDING:
                conn.completions.append(
                    Completion(seq, idx, result.status, result.value)
                )
            mine = None  # executing may flip migration state or the map

    def cancel_deferred(self, predicate=None) -> int:
        """Complete deferred requests with ST_REISSUE so clients re-route.

        ``predicate(key)`` selects which (default: all). Used when a
        migration is cancelled and gated requests must go back out.
        """
        bounced = 0
        for dq in self._deferred:
            keep = deque()
            while dq:
                conn, seq, idx, req = dq.popleft()
                if predicate is not None and not predicate(req.key):
                    keep.append((conn, seq, idx, req))
                    continue
                if conn.open:
                    conn.completions.append(Completion(seq, idx, ST_REISSUE))
                bounced += 1
            dq.extend(keep)
        return bounced

    def deferred_count(self) -> int:
        return sum(len(dq) for dq in self._deferred)

    def _drain_completions(self, tid: int) -> None:
        """Finish pending store operations and ship completion records."""
        for op in self.store.complete_pending():
            if op.session is None:
                continue
            conn_id, seq, idx = op.session
            conn = self._conn_by_id.get(conn_id)
            if conn is None or not conn.open:
                continue
            status, value = op.result
            conn.completions.append(Completion(
                seq, idx,
                ST_OK if status == OK else ST_NOT_FOUND,
                value if isinstance(value, bytes) else b"",
            ))
        for conn in self._conns[tid]:
            if conn.completions and conn.open:
                batch = pack_response_batch(
                    COMPLETION_ONLY_SEQ, BATCH_OK, self._thread_view[tid],
                    (), conn.completions,
                )
                conn.transport.send_bytes(encode_frame(MSG_RESPONSE_BATCH, batch))
                self.completions_sent += len(conn.completions)
                conn.completions = []

    # -- view refresh ---------------------------------------------------------------

    def _maybe_refresh_view(self) -> None:
        """Rate-limited metadata refresh after a view mismatch."""
        if self.hold_view_refresh:
            return
        now = time.monotonic()
        if now - self._last_view_refresh < self.config.view_refresh_interval_s:
            return
        self._last_view_refresh = now
        try:
            newer = self.metadata.poll_changes(self.views.latest().map_version)
        except (OSError, ProtocolError) as exc:
            logger.warning("view refresh failed: %s", exc)
            return
        if newer is not None:
            self.install_map(newer)
            logger.info(
                "server %d refreshed to map v%d (view %d)",
                self.server_id, newer.map_version,
                newer.views.get(self.server_id, 0),
            )

    def install_map(self, new_map, on_all_adopted=None) -> None:
        """Adopt a newer ownership map at every thread's next boundary.

        Ranges gained relative to the previous map start warming (their
        data is still at the old owner, so requests pend); ranges lost stop
        warming. A migration runtime narrows the gained set via
        ``gate_filter`` when it has already received the handoff.
        """
        mine_old = self.views.latest().server_ranges(self.server_id)
        mine_new = new_map.server_ranges(self.server_id)
        gained = subtract_ranges(mine_new, mine_old)
        lost = subtract_ranges(mine_old, mine_new)
        if lost:
            self.warming_ranges = subtract_ranges(self.warming_ranges, lost)
            if self.on_ranges_lost is not None:
                self.on_ranges_lost(lost)
        if gained:
            if self.gate_filter is not None:
                gained = self.gate_filter(gained)
            if gained:
                self.warming_ranges = tuple(self.warming_ranges) + tuple(gained)
        self.views.install(new_map, on_all_adopted)

    def release_warming(self, ranges) -> None:
        """Data for ``ranges`` has arrived; stop pending requests for them."""
        self.warming_ranges = subtract_ranges(self.warming_ranges, ranges)
