"""Server dispatch: view validation, batch execution, completion delivery."""

from __future__ import annotations

import struct
import time

import pytest

from shadowkv._hash import hash64
from shadowkv.metadata import MetadataStore
from shadowkv.server import ServerConfig, ServerProcess
from shadowkv.sessions import Router, Session, TcpTransport, loopback_pair
from shadowkv.store import StoreConfig
from shadowkv.views import HashRange, OwnershipMap
from shadowkv.wire import (
    OP_ADD,
    OP_READ,
    OP_UPSERT,
    ST_NOT_FOUND,
    ST_OK,
    Request,
    encode_frame,
    pack_request_batch,
)

PAGE = 4096


def store_config(tmp_path, **overrides) -> StoreConfig:
    base = dict(
        memory_budget=4 * PAGE,
        page_size=PAGE,
        bucket_count=256,
        value_bound=512,
        data_dir=str(tmp_path / "log"),
        mutable_fraction=0.5,
        poison_on_reclaim=True,
    )
    base.update(overrides)
    return StoreConfig(**base)


def force_eviction(store) -> None:
    """Push everything below the current tail page out of memory."""
    log = store.log
    target = log.tail_offset - (log.tail_offset % PAGE)
    if target > log.read_only_offset:
        log.shift_read_only(target)
        store.refresh()
    log.wait_local_flushed(min(target, log.read_only_offset))
    log.evict_to_local(min(target, log.safe_read_only_offset))
    store.refresh()


def key_with_hash_in(lo: int, hi: int, avoid=(), start: int = 1) -> int:
    key = start
    while not (lo <= hash64(key) < hi) or key in avoid:
        key += 1
    return key


def collector(log: list, tag):
    def cb(status, value):
        log.append((tag, status, value))

    return cb


class Harness:
    """One server plus loopback clients, driven deterministically."""

    def __init__(self, tmp_path, threads: int = 1, server_id: int = 7,
                 owner_map: OwnershipMap | None = None, **store_overrides):
        self.meta = MetadataStore(str(tmp_path / "meta" / "wal"))
        self.meta.bootstrap(owner_map or OwnershipMap.single_owner(server_id))
        self.server = ServerProcess(
            ServerConfig(server_id, store_config(tmp_path, **store_overrides),
                         threads=threads),
            self.meta,
        )
        self.server.store.register_thread()
        self.server.store.protect()
        self.sessions: list[Session] = []
        self._next_session = 1

    def client_session(self, thread_id: int = 0, view: int | None = None,
                       **session_kw) -> Session:
        client_end, server_end = loopback_pair()
        self.server.attach(server_end, thread_id)
        m = self.meta.get_ownership()
        sess = Session(
            self._next_session,
            self.server.server_id,
            client_end,
            m.views[self.server.server_id] if view is None else view,
            m.server_ranges(self.server.server_id),
            **session_kw,
        )
        self._next_session += 1
        self.sessions.append(sess)
        return sess

    def pump(self, rounds: int = 200, until=None) -> None:
        for _ in range(rounds):
            for s in self.sessions:
                s.flush()
            for tid in range(self.server.config.threads):
                self.server.step(tid)
            for s in self.sessions:
                s.poll()
            if until is not None and until():
                return
            if until is not None:
                time.sleep(0.0005)  # let store I/O threads run
        if until is not None:
            raise AssertionError("condition never reached while pumping")

    def close(self) -> None:
        self.server.store.unprotect()
        self.server.close()
        self.meta.close()


@pytest.fixture
def harness(tmp_path):
    h = Harness(tmp_path)
    yield h
    h.close()


def add_operand(delta: int) -> bytes:
    return struct.pack("<Q", delta)


# -- plain request execution ----------------------------------------------------


def test_upsert_then_read_round_trip(harness):
    log = []
    sess = harness.client_session()
    sess.issue(OP_UPSERT, 10, b"alpha", collector(log, "w"))
    sess.issue(OP_READ, 10, b"", collector(log, "r"))
    sess.issue(OP_READ, 11, b"", collector(log, "miss"))
    harness.pump(until=lambda: len(log) == 3)
    assert log == [
        ("w", ST_OK, b""),
        ("r", ST_OK, b"alpha"),
        ("miss", ST_NOT_FOUND, b""),
    ]


def test_rmw_add_applies_little_endian_wrapping_sum(harness):
    log = []
    sess = harness.client_session()
    sess.issue(OP_ADD, 99, add_operand(5), collector(log, "a1"))
    sess.issue(OP_ADD, 99, add_operand(7), collector(log, "a2"))
    sess.issue(OP_READ, 99, b"", collector(log, "r"))
    harness.pump(until=lambda: len(log) == 3)
    assert log[0] == ("a1", ST_OK, struct.pack("<Q", 5))
    assert log[1] == ("a2", ST_OK, struct.pack("<Q", 12))
    assert log[2] == ("r", ST_OK, struct.pack("<Q", 12))


def test_matching_view_one_comparison_no_range_lookups(harness):
    log = []
    sess = harness.client_session()
    for key in (1, 2, 3):
        sess.issue(OP_UPSERT, key, b"v%d" % key)
    harness.pump(until=lambda: harness.server.ops_executed == 3)

    adopted = harness.server.views.latest()
    lookups_before = adopted.lookups
    checks_before = harness.server.view_checks
    for key in (1, 2, 3):
        sess.issue(OP_READ, key, b"", collector(log, key))
    sess.flush()  # one batch of three reads
    harness.server.step(0)
    sess.poll()

    assert [entry[1:] for entry in log] == [
        (ST_OK, b"v1"), (ST_OK, b"v2"), (ST_OK, b"v3")
    ]
    # admission cost: exactly one view comparison, zero per-key range lookups
    assert harness.server.view_checks - checks_before == 1
    assert adopted.lookups - lookups_before == 0
    assert harness.server.batches_rejected == 0


def test_stale_view_batch_rejected_without_executing(harness):
    rejections = []
    sess = harness.client_session(
        view=0,  # behind the server's view 1
        rejection_handler=lambda s, seq, server_view: rejections.append(
            (seq, server_view)
        ),
    )
    for key in (1, 2, 3):
        sess.issue(OP_UPSERT, key, b"x")
    sess.flush()
    harness.server.step(0)
    sess.poll()

    assert rejections == [(0, 1)]
    assert harness.server.batches_rejected == 1
    assert harness.server.ops_executed == 0
    assert harness.server.store.upserts.value == 0


def test_client_ahead_of_server_refresh_then_accept(tmp_path):
    """A client can learn a new view before its server does.

    The server rejects the first batch, refreshes its map from metadata,
    and accepts the re-sent batch; nothing executes under the old view.
    """
    h = Harness(tmp_path)
    try:
        sliver_lo = 1 << 60
        moved = HashRange(sliver_lo, sliver_lo + (1 << 10))
        h.meta.transfer_ranges(7, 8, [moved])  # bumps server 7 to view 2

        router = Router(h.meta, dialer=lambda server_id: _dial(h, server_id))
        assert router.map.views[7] == 2
        assert h.server.views.latest().views[7] == 1  # server not told yet

        key = key_with_hash_in(0, sliver_lo)
        log = []
        router.upsert(key, b"fresh", collector(log, "w"))
        router.read(key, collector(log, "r"))
        deadline = time.monotonic() + 10
        while len(log) < 2:
            router.flush()
            h.server.step(0)
            router.poll()
            assert time.monotonic() < deadline

        assert log == [("w", ST_OK, b""), ("r", ST_OK, b"fresh")]
        assert h.server.batches_rejected >= 1
        assert h.server.views.latest().map_version == 2
        # the rejected attempt executed nothing
        assert h.server.ops_executed == 2
    finally:
        h.close()


def _dial(h: Harness, server_id: int):
    assert server_id == h.server.server_id
    client_end, server_end = loopback_pair()
    h.server.attach(server_end, 0)
    return client_end


def test_hold_view_refresh_defers_adoption(tmp_path):
    """While refresh is held (migration sampling and prepare), mismatched
    batches keep bouncing; releasing the hold lets the server catch up."""
    h = Harness(tmp_path)
    try:
        h.meta.transfer_ranges(7, 8, [HashRange(1 << 60, (1 << 60) + 1024)])
        h.server.hold_view_refresh = True

        router = Router(h.meta, dialer=lambda sid: _dial(h, sid))
        key = key_with_hash_in(0, 1 << 60)
        log = []
        router.upsert(key, b"later", collector(log, "w"))
        for _ in range(8):
            router.flush()
            h.server.step(0)
            router.poll()
        assert not log  # still bouncing: server stays on the old view
        assert h.server.batches_rejected >= 2
        assert h.server.views.latest().map_version == 1

        h.server.hold_view_refresh = False
        deadline = time.monotonic() + 10
        while not log:
            router.flush()
            h.server.step(0)
            router.poll()
            assert time.monotonic() < deadline
        assert log == [("w", ST_OK, b"")]
        assert h.server.views.latest().map_version == 2
    finally:
        h.close()


# -- pending operations over the wire ---------------------------------------------


def test_evicted_reads_answer_pending_then_complete(harness):
    sess = harness.client_session()
    done = []
    sess.issue(OP_UPSERT, 21, b"cold-one")
    sess.issue(OP_UPSERT, 22, b"cold-two")
    harness.pump(until=lambda: harness.server.ops_executed == 2)
    store = harness.server.store
    filler = 1000
    while store.log.tail_offset < 2 * PAGE:  # push the cold keys off the tail page
        store.upsert(filler, b"x" * 200)
        filler += 1
    force_eviction(store)

    pended_before = store.pendings_issued.value
    sess.issue(OP_READ, 21, b"", collector(done, "c1"))
    sess.issue(OP_UPSERT, 23, b"hot", collector(done, "h"))
    sess.issue(OP_READ, 22, b"", collector(done, "c2"))
    harness.pump(until=lambda: len(done) == 3)

    # both cold reads went through the pending path and finished over
    # completion records; the in-memory upsert was answered in the batch
    assert store.pendings_issued.value - pended_before == 2
    assert harness.server.completions_sent == 2
    assert done[0] == ("h", ST_OK, b"")
    assert ("c1", ST_OK, b"cold-one") in done
    assert ("c2", ST_OK, b"cold-two") in done
    assert not sess.pended


# -- request gate (migration hooks) ------------------------------------------------


def test_gated_requests_defer_until_release(harness):
    gated_key = 5
    harness.server.request_gate = lambda key: key == gated_key
    log = []
    sess = harness.client_session()
    sess.issue(OP_UPSERT, gated_key, b"blocked", collector(log, "g"))
    sess.issue(OP_UPSERT, 6, b"free", collector(log, "f"))
    sess.flush()
    harness.server.step(0)
    sess.poll()

    assert log == [("f", ST_OK, b"")]
    assert harness.server.deferred_count() == 1
    assert harness.server.store.upserts.value == 1

    harness.server.request_gate = None
    harness.pump(until=lambda: len(log) == 2)
    assert ("g", ST_OK, b"") in log
    assert harness.server.deferred_count() == 0

    check = []
    sess.issue(OP_READ, gated_key, b"", collector(check, "r"))
    harness.pump(until=lambda: len(check) == 1)
    assert check == [("r", ST_OK, b"blocked")]


def test_cancel_deferred_sends_reissue_completions(harness):
    harness.server.request_gate = lambda key: True
    reissued = []
    sess = harness.client_session(
        reissue_handler=lambda s, req: reissued.append(req.key)
    )
    sess.issue(OP_UPSERT, 41, b"bounce")
    sess.flush()
    harness.server.step(0)
    sess.poll()
    assert harness.server.deferred_count() == 1

    harness.server.request_gate = None
    assert harness.server.cancel_deferred() == 1
    harness.server.step(0)  # flushes the reissue completion record
    sess.poll()
    assert reissued == [41]
    assert harness.server.deferred_count() == 0
    assert harness.server.store.upserts.value == 0


# -- protocol errors ----------------------------------------------------------------


def test_bad_magic_closes_connection(harness):
    client_end, server_end = loopback_pair()
    harness.server.attach(server_end, 0)
    body = bytearray(pack_request_batch(1, 1, 0, [Request(OP_READ, 1)]))
    body[0] ^= 0xFF
    client_end.send_bytes(encode_frame(0x01, bytes(body)))
    harness.server.step(0)
    assert not client_end.is_open


def test_unknown_frame_kind_closes_connection(harness):
    client_end, server_end = loopback_pair()
    harness.server.attach(server_end, 0)
    client_end.send_bytes(encode_frame(0x7F, b""))
    harness.server.step(0)
    assert not client_end.is_open


def test_unknown_opcode_closes_connection(harness):
    client_end, server_end = loopback_pair()
    harness.server.attach(server_end, 0)
    body = pack_request_batch(1, 1, 0, [Request(9, 1, b"")])
    client_end.send_bytes(encode_frame(0x01, body))
    harness.server.step(0)
    assert not client_end.is_open


# -- threading discipline ------------------------------------------------------------


def test_connections_never_cross_threads(tmp_path):
    h = Harness(tmp_path, threads=2)
    sessions = []
    logs = []
    try:
        for i in range(4):
            log = []
            sess = h.client_session(thread_id=i % 2)
            for k in range(3):
                key = 100 * (i + 1) + k
                sess.issue(OP_UPSERT, key, b"v", collector(log, ("w", key)))
                sess.issue(OP_READ, key, b"", collector(log, ("r", key)))
            sessions.append(sess)
            logs.append(log)

        h.server.start()
        try:
            deadline = time.monotonic() + 10
            while any(len(log) < 6 for log in logs):
                for sess in sessions:
                    sess.flush()
                    sess.poll()
                assert time.monotonic() < deadline
                time.sleep(0.001)
        finally:
            h.server.stop()

        assert h.server.cross_thread_violations == 0
        for log in logs:
            assert [entry[1] for entry in log] == [ST_OK] * 6
        by_thread = {0: 0, 1: 0}
        for conn in h.server._conn_by_id.values():
            by_thread[conn.thread_id] += 1
        assert by_thread == {0: 2, 1: 2}
    finally:
        h.close()


def test_tcp_listener_end_to_end(tmp_path):
    meta = MetadataStore(str(tmp_path / "meta" / "wal"))
    meta.bootstrap(OwnershipMap.single_owner(3))
    server = ServerProcess(
        ServerConfig(3, store_config(tmp_path), threads=2,
                     listen=("127.0.0.1", 0)),
        meta,
    )
    addr = server.open_listener()
    server.start()
    try:
        m = meta.get_ownership()
        sess = Session(9, 3, TcpTransport.connect(addr), m.views[3],
                       m.server_ranges(3))
        log = []
        sess.issue(OP_UPSERT, 777, b"over-tcp", collector(log, "w"))
        sess.issue(OP_READ, 777, b"", collector(log, "r"))
        deadline = time.monotonic() + 10
        while len(log) < 2:
            sess.flush()
            sess.poll()
            assert time.monotonic() < deadline
            time.sleep(0.001)
        assert log == [("w", ST_OK, b""), ("r", ST_OK, b"over-tcp")]
        sess.close()
    finally:
        server.stop()
        server.close()
        meta.close()
