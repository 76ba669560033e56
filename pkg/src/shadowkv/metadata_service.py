"""Network front end for the coordination store.

``MetadataService`` serves one ``MetadataStore`` over TCP so routers,
servers, and the control CLI in other processes share a single
authoritative ownership map. ``MetadataClient`` is a blocking client with
the same method surface as ``MetadataStore``, so in-process callers and
remote callers are interchangeable anywhere a ``get_ownership`` /
``poll_changes`` provider is expected.

The service is a single-threaded selector loop: requests are small, every
reply is one frame, and the store itself serializes mutations.
"""

from __future__ import annotations

import logging
import selectors
import socket
import struct
import threading

from .errors import ProtocolError, UsageError
from .metadata import MetadataStore, MigrationDependency
from .views import OwnershipMap
from .wire import (
    ERR_BAD_MESSAGE,
    ERR_INTERNAL,
    ERR_REJECTED,
    ERR_UNKNOWN_ID,
    DEP_CANCELLED,
    DEP_REVERTED,
    DEP_SOURCE_DONE,
    DEP_TARGET_DONE,
    MSG_CTL_ERR,
    MSG_CTL_OK,
    MSG_META_BOOTSTRAP,
    MSG_META_DEP_INFO,
    MSG_META_GET_DEP,
    MSG_META_GET_MAP,
    MSG_META_MAP,
    MSG_META_MIGRATION_ID,
    MSG_META_POLL,
    MSG_META_REVERT,
    MSG_META_SET_FLAG,
    MSG_META_SWEEP,
    MSG_META_TRANSFER,
    MSG_META_UNCHANGED,
    FrameAssembler,
    MetaDepInfo,
    MetaTransfer,
    encode_frame,
    pack_ctl_err,
    pack_ctl_ok,
    pack_meta_dep_info,
    pack_meta_map,
    pack_meta_poll,
    pack_meta_set_flag,
    pack_meta_transfer,
    pack_migration_id,
    parse_ctl_err,
    parse_ctl_ok,
    parse_meta_dep_info,
    parse_meta_map,
    parse_meta_poll,
    parse_meta_set_flag,
    parse_meta_transfer,
    parse_migration_id,
)

logger = logging.getLogger(__name__)


class MetadataService:
    """Serves a ``MetadataStore`` to remote clients, one frame per request."""

    def __init__(self, store: MetadataStore, listen: tuple[str, int] = ("127.0.0.1", 0)):
        self.store = store
        self._listen_addr = listen
        self._sel: selectors.DefaultSelector | None = None
        self._listener: socket.socket | None = None
        self._wake_r: socket.socket | None = None
        self._wake_w: socket.socket | None = None
        self._thread: threading.Thread | None = None
        self._stopping = False
        self.address: tuple[str, int] | None = None
        self.requests_served = 0

    # -- lifecycle ---------------------------------------------------------------

    def start(self) -> tuple[str, int]:
        self._listener = socket.create_server(self._listen_addr, backlog=64)
        self._listener.setblocking(False)
        self.address = self._listener.getsockname()
        self._sel = selectors.DefaultSelector()
        self._sel.register(self._listener, selectors.EVENT_READ, ("accept", None))
        self._wake_r, self._wake_w = socket.socketpair()
        self._wake_r.setblocking(False)
        self._sel.register(self._wake_r, selectors.EVENT_READ, ("wake", None))
        self._thread = threading.Thread(
            target=self._serve, name="metadata-service", daemon=True
        )
        self._thread.start()
        return self.address

    def stop(self) -> None:
        if self._thread is None:
            return
        self._stopping = True
        self._wake_w.send(b"x")
        self._thread.join(timeout=10)
        self._thread = None
        for key in list(self._sel.get_map().values()):
            if key.data[0] == "conn":
                key.fileobj.close()
        self._sel.close()
        self._listener.close()
        self._wake_r.close()
        self._wake_w.close()

    # -- event loop -----------------------------------------------------------------

    class _Conn:
        __slots__ = ("sock", "assembler", "outbox")

        def __init__(self, sock):
            self.sock = sock
            self.assembler = FrameAssembler()
            self.outbox = bytearray()

    def _serve(self) -> None:
        while not self._stopping:
            for key, events in self._sel.select(timeout=1.0):
                role, conn = key.data
                if role == "accept":
                    self._accept()
                elif role == "wake":
                    key.fileobj.recv(64)
                else:
                    self._service(conn, events)

    def _accept(self) -> None:
        while True:
            try:
                sock, _ = self._listener.accept()
            except (BlockingIOError, InterruptedError):
                return
            except OSError:
                return
            sock.setblocking(False)
            sock.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)
            conn = self._Conn(sock)
            self._sel.register(sock, selectors.EVENT_READ, ("conn", conn))

    def _close(self, conn: "_Conn") -> None:
        try:
            self._sel.unregister(conn.sock)
        except KeyError:
            pass
        conn.sock.close()

    def _service(self, conn: "_Conn", events: int) -> None:
        if events & selectors.EVENT_READ:
            try:
                while True:
                    chunk = conn.sock.recv(1 << 16)
                    if not chunk:
                        self._close(conn)
                        return
                    conn.assembler.feed(chunk)
            except (BlockingIOError, InterruptedError):
                pass
            except OSError:
                self._close(conn)
                return
            try:
                for kind, body in conn.assembler.frames():
                    conn.outbox += self._handle(kind, body)
                    self.requests_served += 1
            except ProtocolError as exc:
                logger.warning("metadata client protocol error: %s", exc)
                conn.outbox += encode_frame(
                    MSG_CTL_ERR, pack_ctl_err(ERR_BAD_MESSAGE, str(exc))
                )
                self._flush(conn, closing=True)
                return
        if events & selectors.EVENT_WRITE or conn.outbox:
            self._flush(conn)

    def _flush(self, conn: "_Conn", closing: bool = False) -> None:
        try:
            while conn.outbox:
                sent = conn.sock.send(conn.outbox)
                del conn.outbox[:sent]
        except (BlockingIOError, InterruptedError):
            pass
        except OSError:
            self._close(conn)
            return
        if closing and not conn.outbox:
            self._close(conn)
            return
        mask = selectors.EVENT_READ | (selectors.EVENT_WRITE if conn.outbox else 0)
        self._sel.modify(conn.sock, mask, ("conn", conn))

    # -- request handling -----------------------------------------------------------

    def _handle(self, kind: int, body) -> bytes:
        """One reply frame per request; domain failures become ctl-err.

        Parsing happens before the store call, so a malformed body raises
        ``ProtocolError`` to the loop (which answers and closes), while a
        store precondition failure answers ctl-err and keeps the connection.
        """
        body = bytes(body)
        store = self.store
        if kind == MSG_META_GET_MAP:
            run = lambda: encode_frame(MSG_META_MAP, pack_meta_map(store.get_ownership()))
        elif kind == MSG_META_POLL:
            since = parse_meta_poll(body)

            def run():
                newer = store.poll_changes(since)
                if newer is None:
                    return encode_frame(MSG_META_UNCHANGED, b"")
                return encode_frame(MSG_META_MAP, pack_meta_map(newer))
        elif kind == MSG_META_TRANSFER:
            t = parse_meta_transfer(body)
            run = lambda: encode_frame(
                MSG_META_MIGRATION_ID,
                pack_migration_id(store.transfer_ranges(t.source, t.target, t.ranges)),
            )
        elif kind == MSG_META_SET_FLAG:
            migration_id, which = parse_meta_set_flag(body)

            def run():
                store.set_flag(migration_id, which)
                return encode_frame(MSG_CTL_OK, pack_ctl_ok())
        elif kind == MSG_META_REVERT:
            mid = parse_migration_id(body)

            def run():
                store.revert_ranges(mid)
                return encode_frame(MSG_CTL_OK, pack_ctl_ok())
        elif kind == MSG_META_BOOTSTRAP:
            owner_map = parse_meta_map(body)

            def run():
                store.bootstrap(owner_map)
                return encode_frame(MSG_CTL_OK, pack_ctl_ok())
        elif kind == MSG_META_GET_DEP:
            dep_id = parse_migration_id(body)
            run = lambda: encode_frame(
                MSG_META_DEP_INFO, pack_meta_dep_info(_dep_info(store.dependency(dep_id)))
            )
        elif kind == MSG_META_SWEEP:
            run = lambda: encode_frame(MSG_CTL_OK, pack_ctl_ok(store.sweep()))
        else:
            raise ProtocolError(f"unknown metadata request kind {kind:#x}")

        try:
            return run()
        except UsageError as exc:
            code = ERR_UNKNOWN_ID if "no migration dependency" in str(exc) else ERR_REJECTED
            return encode_frame(MSG_CTL_ERR, pack_ctl_err(code, str(exc)))
        except ProtocolError as exc:  # store precondition (e.g. cancel after commit)
            return encode_frame(MSG_CTL_ERR, pack_ctl_err(ERR_REJECTED, str(exc)))
        except Exception as exc:  # pragma: no cover - defensive
            logger.exception("metadata request failed")
            return encode_frame(MSG_CTL_ERR, pack_ctl_err(ERR_INTERNAL, str(exc)))


def _dep_info(dep: MigrationDependency) -> MetaDepInfo:
    flags = (
        (DEP_SOURCE_DONE if dep.source_done else 0)
        | (DEP_TARGET_DONE if dep.target_done else 0)
        | (DEP_CANCELLED if dep.cancelled else 0)
        | (DEP_REVERTED if dep.reverted else 0)
    )
    return MetaDepInfo(
        dep.migration_id, dep.source, dep.target,
        dep.source_view, dep.target_view, flags, dep.ranges,
    )


def _dep_from_info(info: MetaDepInfo) -> MigrationDependency:
    return MigrationDependency(
        migration_id=info.migration_id,
        source=info.source,
        target=info.target,
        ranges=info.ranges,
        source_view=info.source_view,
        target_view=info.target_view,
        source_done=bool(info.flags & DEP_SOURCE_DONE),
        target_done=bool(info.flags & DEP_TARGET_DONE),
        cancelled=bool(info.flags & DEP_CANCELLED),
        reverted=bool(info.flags & DEP_REVERTED),
    )


class MetadataClient:
    """Blocking remote handle with the ``MetadataStore`` method surface.

    One request is outstanding at a time (an internal lock serializes
    callers), so a single client can be shared across threads.
    """

    def __init__(self, address: tuple[str, int], timeout: float = 5.0):
        self._sock = socket.create_connection(address, timeout=timeout)
        self._sock.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)
        self._assembler = FrameAssembler()
        self._lock = threading.Lock()

    def close(self) -> None:
        self._sock.close()

    def _call(self, kind: int, body: bytes) -> tuple[int, bytes]:
        with self._lock:
            self._sock.sendall(encode_frame(kind, body))
            while True:
                for reply_kind, reply_body in self._assembler.frames():
                    return reply_kind, bytes(reply_body)
                chunk = self._sock.recv(1 << 16)
                if not chunk:
                    raise OSError("metadata service closed the connection")
                self._assembler.feed(chunk)

    def _expect(self, kind: int, body: bytes, want: int) -> bytes:
        reply_kind, reply_body = self._call(kind, body)
        if reply_kind == want:
            return reply_body
        if reply_kind == MSG_CTL_ERR:
            code, message = parse_ctl_err(reply_body)
            raise UsageError(f"metadata request rejected ({code}): {message}")
        raise ProtocolError(f"unexpected metadata reply kind {reply_kind:#x}")

    # -- MetadataStore surface ---------------------------------------------------

    def get_ownership(self) -> OwnershipMap:
        return parse_meta_map(self._expect(MSG_META_GET_MAP, b"", MSG_META_MAP))

    def poll_changes(self, since_version: int) -> OwnershipMap | None:
        reply_kind, reply_body = self._call(MSG_META_POLL, pack_meta_poll(since_version))
        if reply_kind == MSG_META_UNCHANGED:
            return None
        if reply_kind == MSG_META_MAP:
            return parse_meta_map(reply_body)
        if reply_kind == MSG_CTL_ERR:
            code, message = parse_ctl_err(reply_body)
            raise UsageError(f"metadata request rejected ({code}): {message}")
        raise ProtocolError(f"unexpected metadata reply kind {reply_kind:#x}")

    def transfer_ranges(self, source: int, target: int, ranges) -> int:
        body = pack_meta_transfer(MetaTransfer(source, target, tuple(ranges)))
        return parse_migration_id(
            self._expect(MSG_META_TRANSFER, body, MSG_META_MIGRATION_ID)
        )

    def set_flag(self, migration_id: int, which: str) -> None:
        self._expect(MSG_META_SET_FLAG, pack_meta_set_flag(migration_id, which), MSG_CTL_OK)

    def revert_ranges(self, migration_id: int) -> None:
        self._expect(MSG_META_REVERT, pack_migration_id(migration_id), MSG_CTL_OK)

    def bootstrap(self, owner_map: OwnershipMap) -> None:
        self._expect(MSG_META_BOOTSTRAP, pack_meta_map(owner_map), MSG_CTL_OK)

    def dependency(self, migration_id: int) -> MigrationDependency:
        body = self._expect(MSG_META_GET_DEP, pack_migration_id(migration_id), MSG_META_DEP_INFO)
        return _dep_from_info(parse_meta_dep_info(body))

    def sweep(self) -> int:
        count, _ = parse_ctl_ok(self._expect(MSG_META_SWEEP, b"", MSG_CTL_OK))
        return count
