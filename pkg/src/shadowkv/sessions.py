"""Client sessions: batched, pipelined, callback-completed request streams.

A ``Session`` binds one client thread to one server connection. Requests
buffer locally and travel in view-tagged batches; pipelining keeps up to a
window of batches in flight. The server accepts a batch iff its view tag
matches the server's own view, so a stale client learns about ownership
changes as whole-batch rejections. The ``Router`` owns the client's map
snapshot and the per-server sessions; on a rejection it refreshes the map
and re-buffers every not-yet-acknowledged request from the rejected batch
onward into whichever session owns its key now, preserving original issue
order.

Nothing here spawns threads: callers drive progress by calling ``poll``.
A session must only ever be touched by the thread that created it.
"""

from __future__ import annotations

import logging
import socket
import time
from collections import OrderedDict, deque

from ._hash import hash64
from .errors import Backpressure, ProtocolError, UsageError
from .views import OwnershipMap
from .wire import (
    BATCH_OK,
    BATCH_VIEW_REJECTED,
    COMPLETION_ONLY_SEQ,
    MSG_REQUEST_BATCH,
    MSG_RESPONSE_BATCH,
    OP_ADD,
    OP_READ,
    OP_UPSERT,
    ST_PENDING,
    ST_REISSUE,
    FrameAssembler,
    Request,
    encode_frame,
    pack_request_batch,
    parse_response_batch,
)

logger = logging.getLogger(__name__)

DEFAULT_BATCH_CAPACITY = 32 * 1024  # serialized request bytes per batch
DEFAULT_WINDOW = 16  # in-flight batches per session
DEFAULT_IDLE_FLUSH_S = 200e-6  # flush a partial batch after this much idleness

_OP_OVERHEAD = 13  # u8 opcode + u64 key + u32 value_len


def _request_size(value: bytes) -> int:
    return _OP_OVERHEAD + len(value)


class PendingRequest:
    """One issued request: wire fields plus its completion callback.

    Callbacks receive ``(status, value)`` with ``value`` being the raw wire
    bytes: the read result for ST_OK reads, the post-image for rmw-adds,
    and b"" for upsert acks and not-found.
    """

    __slots__ = ("opcode", "key", "value", "callback", "done")

    def __init__(self, opcode: int, key: int, value: bytes, callback):
        self.opcode = opcode
        self.key = key
        self.value = value
        self.callback = callback
        self.done = False

    def fire(self, status: int, value: bytes) -> None:
        if self.done:
            raise ProtocolError(
                f"request for key {self.key:#x} completed twice"
            )
        self.done = True
        if self.callback is not None:
            self.callback(status, value)


# -- transports ---------------------------------------------------------------------


class LoopbackTransport:
    """One end of an in-memory frame pipe (see ``loopback_pair``)."""

    def __init__(self, out_q: deque, in_q: deque, state):
        self._out = out_q
        self._in = in_q
        self._state = state
        self._assembler = FrameAssembler()

    def send_bytes(self, data: bytes) -> None:
        if self._state["closed"]:
            raise ProtocolError("transport is closed")
        self._out.append(data)

    def poll(self):
        """Yield (kind, body) for every complete frame received so far."""
        while self._in:
            self._assembler.feed(self._in.popleft())
        return self._assembler.frames()

    @property
    def is_open(self) -> bool:
        return not self._state["closed"]

    def close(self) -> None:
        self._state["closed"] = True


def loopback_pair() -> tuple[LoopbackTransport, LoopbackTransport]:
    """(client end, server end) of an in-memory connection."""
    a: deque = deque()
    b: deque = deque()
    state = {"closed": False}
    return LoopbackTransport(a, b, state), LoopbackTransport(b, a, state)


class TcpTransport:
    """Non-blocking framed TCP: buffered sends, poll-driven receives."""

    def __init__(self, sock: socket.socket):
        sock.setblocking(False)
        sock.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)
        self._sock = sock
        self._outbox = bytearray()
        self._assembler = FrameAssembler()
        self._open = True

    @classmethod
    def connect(cls, address: tuple[str, int], timeout: float = 5.0) -> "TcpTransport":
        return cls(socket.create_connection(address, timeout=timeout))

    def fileno(self) -> int:
        return self._sock.fileno()

    @property
    def is_open(self) -> bool:
        return self._open

    def send_bytes(self, data: bytes) -> None:
        if not self._open:
            raise ProtocolError("transport is closed")
        self._outbox += data
        self._pump_out()

    def _pump_out(self) -> None:
        while self._outbox:
            try:
                sent = self._sock.send(self._outbox)
            except (BlockingIOError, InterruptedError):
                return
            except OSError:
                self._open = False
                return
            del self._outbox[:sent]

    def poll(self):
        """Yield (kind, body) for every complete frame received so far."""
        self._pump_out()
        while self._open:
            try:
                chunk = self._sock.recv(1 << 16)
            except (BlockingIOError, InterruptedError):
                break
            except OSError:
                self._open = False
                break
            if not chunk:
                self._open = False
                break
            self._assembler.feed(chunk)
        return self._assembler.frames()

    def close(self) -> None:
        self._open = False
        try:
            self._sock.close()
        except OSError:
            pass


# -- sessions ------------------------------------------------------------------------


class Session:
    """A pipelined request stream from one client thread to one server.

    The session validates routing at issue time against its cached ranges,
    tags every transmitted batch with its cached view, and completes each
    request's callback exactly once, in per-batch issue order. Ownership
    churn surfaces as batch rejections which the owning ``Router`` resolves;
    a standalone session (no router) treats a rejection as fatal.
    """

    def __init__(
        self,
        session_id: int,
        server_id: int,
        transport,
        view: int,
        ranges,
        batch_capacity: int = DEFAULT_BATCH_CAPACITY,
        window: int = DEFAULT_WINDOW,
        rejection_handler=None,
        reissue_handler=None,
        clock=time.monotonic,
    ):
        self.session_id = session_id
        self.server_id = server_id
        self.transport = transport
        self.cached_view = view
        self.cached_ranges = tuple(ranges)
        self.batch_capacity = batch_capacity
        self.window = window
        self.rejection_handler = rejection_handler
        self.reissue_handler = reissue_handler
        self.clock = clock

        self.send_buffer: deque[PendingRequest] = deque()
        self.buffered_bytes = 0
        self.in_flight: OrderedDict[int, list[PendingRequest]] = OrderedDict()
        self.pended: dict[tuple[int, int], PendingRequest] = {}
        self.next_batch_seq = 0
        self.last_issue_at = clock()

        # instrumentation
        self.batches_sent = 0
        self.batches_rejected = 0
        self.requests_completed = 0

    # -- issue / flush ---------------------------------------------------------

    def owns_hash(self, h: int) -> bool:
        return any(r.contains(h) for r in self.cached_ranges)

    def issue(self, opcode: int, key: int, value: bytes = b"", callback=None) -> bool:
        """Buffer one request; never blocks on the network.

        Raises ``UsageError`` (before buffering anything) when the key's
        hash lies outside the session's cached ranges, and ``Backpressure``
        when both the send buffer and the in-flight window are full.
        """
        if opcode not in (OP_READ, OP_UPSERT, OP_ADD):
            raise UsageError(f"unknown opcode {opcode}")
        if not isinstance(value, bytes):
            raise UsageError("request value must be bytes")
        if opcode == OP_ADD and len(value) != 8:
            raise UsageError("rmw-add operand must be 8 bytes")
        if not self.owns_hash(hash64(key)):
            raise UsageError(
                f"key {key:#x} is not owned by server {self.server_id} "
                f"under view {self.cached_view}"
            )
        if self.buffered_bytes + _request_size(value) > self.batch_capacity:
            if len(self.in_flight) >= self.window:
                raise Backpressure(
                    f"session {self.session_id}: window and buffer are full"
                )
            self.flush()
        self._enqueue(PendingRequest(opcode, key, value, callback))
        return True

    def _enqueue(self, req: PendingRequest) -> None:
        """Append without routing or capacity checks (reissue path)."""
        self.send_buffer.append(req)
        self.buffered_bytes += _request_size(req.value)
        self.last_issue_at = self.clock()

    def flush(self) -> int:
        """Transmit buffered requests as view-tagged batches.

        Packs from the front of the buffer, at most ``batch_capacity``
        serialized bytes per batch, while the pipeline window has room.
        Returns the number of batches sent.
        """
        sent = 0
        while self.send_buffer and len(self.in_flight) < self.window:
            batch: list[PendingRequest] = []
            size = 0
            while self.send_buffer:
                need = _request_size(self.send_buffer[0].value)
                if batch and size + need > self.batch_capacity:
                    break
                req = self.send_buffer.popleft()
                batch.append(req)
                size += need
            self.buffered_bytes -= size
            seq = self.next_batch_seq
            self.next_batch_seq += 1
            body = pack_request_batch(
                self.session_id,
                self.cached_view,  # view tag bound at serialization time
                seq,
                [Request(r.opcode, r.key, r.value) for r in batch],
            )
            self.transport.send_bytes(encode_frame(MSG_REQUEST_BATCH, body))
            self.in_flight[seq] = batch
            self.batches_sent += 1
            sent += 1
        return sent

    def idle(self) -> bool:
        return not (self.send_buffer or self.in_flight or self.pended)

    # -- responses ------------------------------------------------------------

    def poll(self) -> int:
        """Process every received frame; returns completed request count."""
        completed = 0
        for kind, body in self.transport.poll():
            if kind != MSG_RESPONSE_BATCH:
                raise ProtocolError(f"unexpected frame kind {kind:#x} on a session")
            completed += self.on_response(parse_response_batch(body))
        return completed

    def on_response(self, resp) -> int:
        if resp.batch_status == BATCH_VIEW_REJECTED:
            self.batches_rejected += 1
            if resp.batch_seq not in self.in_flight:
                # Already shuffled by an earlier rejection in the pipeline.
                return 0
            if next(iter(self.in_flight)) != resp.batch_seq:
                raise ProtocolError(
                    f"rejection for batch {resp.batch_seq} arrived before "
                    f"responses to earlier batches"
                )
            if self.rejection_handler is None:
                raise ProtocolError(
                    f"batch {resp.batch_seq} view-rejected "
                    f"(server view {resp.server_view}) with no handler"
                )
            self.rejection_handler(self, resp.batch_seq, resp.server_view)
            return 0
        completed = 0
        if resp.batch_seq != COMPLETION_ONLY_SEQ:
            batch = self.in_flight.pop(resp.batch_seq, None)
            if batch is None:
                # The batch was shuffled after rejection; the server must
                # never have executed it, so an ok response is a bug.
                raise ProtocolError(
                    f"ok response for unknown batch {resp.batch_seq}"
                )
            if len(resp.results) != len(batch):
                raise ProtocolError(
                    f"batch {resp.batch_seq}: {len(batch)} requests but "
                    f"{len(resp.results)} results"
                )
            for idx, (req, result) in enumerate(zip(batch, resp.results)):
                if result.status == ST_PENDING:
                    self.pended[(resp.batch_seq, idx)] = req
                else:
                    req.fire(result.status, result.value)
                    completed += 1
        completed += self._apply_completions(resp.completions)
        self.requests_completed += completed
        return completed

    def _apply_completions(self, completions) -> int:
        completed = 0
        for c in completions:
            req = self.pended.pop((c.orig_seq, c.orig_idx), None)
            if req is None:
                raise ProtocolError(
                    f"completion for unknown pended request "
                    f"({c.orig_seq}, {c.orig_idx})"
                )
            if c.status == ST_REISSUE:
                if self.reissue_handler is None:
                    raise ProtocolError(
                        "server asked for a reissue but no handler is set"
                    )
                self.reissue_handler(self, req)
            else:
                req.fire(c.status, c.value)
                completed += 1
        return completed

    # -- rejection support -------------------------------------------------------

    def extract_from(self, batch_seq: int) -> list[PendingRequest]:
        """Remove and return, in original issue order, every request in
        batches ``>= batch_seq`` plus the whole send buffer."""
        victims: list[PendingRequest] = []
        for seq in [s for s in self.in_flight if s >= batch_seq]:
            victims.extend(self.in_flight.pop(seq))
        victims.extend(self.send_buffer)
        self.send_buffer.clear()
        self.buffered_bytes = 0
        return victims

    def rebind(self, view: int, ranges) -> None:
        self.cached_view = view
        self.cached_ranges = tuple(ranges)

    def close(self) -> None:
        self.transport.close()


# -- routing --------------------------------------------------------------------------


class Router:
    """One client thread's map snapshot plus its per-server sessions.

    ``dialer(server_id) -> transport`` opens connections; ``metadata`` must
    offer ``get_ownership()`` and ``poll_changes(since_version)`` (the
    in-process metadata store and the remote metadata client both do).

    The router routes by its current snapshot until a rejection proves it
    stale; a background-fresh map is adopted early only while every session
    is idle, so requests already in flight and their successors reach the
    same rejection point in order.
    """

    def __init__(
        self,
        metadata,
        dialer,
        client_id: int | None = None,
        batch_capacity: int = DEFAULT_BATCH_CAPACITY,
        window: int = DEFAULT_WINDOW,
        idle_flush_s: float = DEFAULT_IDLE_FLUSH_S,
        refresh_interval_s: float = 5.0,
        metadata_backoff_s: float = 0.001,
        clock=time.monotonic,
    ):
        self.metadata = metadata
        self.dialer = dialer
        self.batch_capacity = batch_capacity
        self.window = window
        self.idle_flush_s = idle_flush_s
        self.refresh_interval_s = refresh_interval_s
        self.metadata_backoff_s = metadata_backoff_s
        self.clock = clock
        self.map: OwnershipMap = self._fetch_map_blocking()
        self.sessions: dict[int, Session] = {}
        base = client_id if client_id is not None else (id(self) & 0xFFFF)
        self._session_base = (base & 0xFFFFFFFF) << 16
        self._next_session = 0
        self._last_refresh = clock()

        # instrumentation
        self.rejections_handled = 0
        self.requests_reissued = 0
        self.map_refreshes = 0

    # -- metadata ------------------------------------------------------------

    def _fetch_map_blocking(self) -> OwnershipMap:
        """Fetch the latest map, retrying with backoff until it arrives."""
        delay = self.metadata_backoff_s
        while True:
            try:
                m = self.metadata.get_ownership()
                self.map_refreshes = getattr(self, "map_refreshes", 0) + 1
                return m
            except (OSError, ProtocolError) as exc:
                logger.warning("metadata fetch failed (%s); retrying", exc)
                time.sleep(delay)
                delay = min(delay * 2, 0.1)

    def refresh_map(self) -> None:
        self.map = self._fetch_map_blocking()
        self._last_refresh = self.clock()
        for sid, sess in self.sessions.items():
            sess.rebind(self.map.views.get(sid, 0), self.map.server_ranges(sid))

    # -- issue path -------------------------------------------------------------

    def session_for(self, server_id: int) -> Session:
        sess = self.sessions.get(server_id)
        if sess is None:
            sess = Session(
                session_id=self._session_base | self._next_session,
                server_id=server_id,
                transport=self.dialer(server_id),
                view=self.map.views.get(server_id, 0),
                ranges=self.map.server_ranges(server_id),
                batch_capacity=self.batch_capacity,
                window=self.window,
                rejection_handler=self._on_rejection,
                reissue_handler=self._on_reissue,
                clock=self.clock,
            )
            self._next_session += 1
            self.sessions[server_id] = sess
        return sess

    def issue(self, opcode: int, key: int, value: bytes = b"", callback=None) -> bool:
        server, _ = self.map.owner_of(hash64(key))
        return self.session_for(server).issue(opcode, key, value, callback)

    def read(self, key: int, callback) -> bool:
        return self.issue(OP_READ, key, b"", callback)

    def upsert(self, key: int, value: bytes, callback=None) -> bool:
        return self.issue(OP_UPSERT, key, value, callback)

    def add(self, key: int, operand: bytes, callback=None) -> bool:
        return self.issue(OP_ADD, key, operand, callback)

    def flush(self) -> int:
        return sum(sess.flush() for sess in self.sessions.values())

    # -- progress ------------------------------------------------------------

    def poll(self) -> int:
        """Drive all sessions once: receive, complete, idle-flush."""
        completed = 0
        now = self.clock()
        for sess in list(self.sessions.values()):
            completed += sess.poll()
            if sess.send_buffer and now - sess.last_issue_at >= self.idle_flush_s:
                sess.flush()
        if (
            now - self._last_refresh >= self.refresh_interval_s
            and all(s.idle() for s in self.sessions.values())
        ):
            try:
                newer = self.metadata.poll_changes(self.map.map_version)
            except (OSError, ProtocolError):
                newer = None
            self._last_refresh = now
            if newer is not None:
                self.map = newer
                for sid, sess in self.sessions.items():
                    sess.rebind(newer.views.get(sid, 0), newer.server_ranges(sid))
        return completed

    def drain(self, timeout: float = 10.0) -> int:
        """Poll until every session is idle; returns completions seen."""
        completed = 0
        deadline = self.clock() + timeout
        while not all(s.idle() for s in self.sessions.values()):
            self.flush()
            completed += self.poll()
            if self.clock() > deadline:
                stuck = {
                    sid: (len(s.send_buffer), len(s.in_flight), len(s.pended))
                    for sid, s in self.sessions.items()
                    if not s.idle()
                }
                raise TimeoutError(f"sessions never drained: {stuck}")
            time.sleep(0)
        return completed

    def outstanding(self) -> int:
        return sum(
            len(s.send_buffer) + sum(len(b) for b in s.in_flight.values()) + len(s.pended)
            for s in self.sessions.values()
        )

    # -- rejection / reissue ------------------------------------------------------

    def _on_rejection(self, session: Session, batch_seq: int, server_view: int) -> int:
        """Refresh the map and re-route everything from the rejection on.

        The rejected batch and all requests issued after it (later in-flight
        batches plus the send buffer) re-buffer in original issue order into
        the sessions owning their keys under the refreshed map; this point
        is the client thread's edge of the global ownership cut.
        """
        victims = session.extract_from(batch_seq)
        self.rejections_handled += 1
        logger.info(
            "session %d batch %d view-rejected (server %d at view %d): "
            "reissuing %d requests",
            session.session_id, batch_seq, session.server_id, server_view,
            len(victims),
        )
        self.refresh_map()
        for req in victims:
            server, _ = self.map.owner_of(hash64(req.key))
            self.session_for(server)._enqueue(req)
        self.requests_reissued += len(victims)
        return len(victims)

    def _on_reissue(self, session: Session, req: PendingRequest) -> None:
        """Re-route one pended request the server gave back unexecuted."""
        self.refresh_map()
        server, _ = self.map.owner_of(hash64(req.key))
        self.session_for(server)._enqueue(req)
        self.requests_reissued += 1

    def close(self) -> None:
        for sess in self.sessions.values():
            sess.close()
        self.sessions.clear()
