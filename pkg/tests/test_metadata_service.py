"""Metadata service over TCP: remote clients see the MetadataStore surface."""

from __future__ import annotations

import socket
import threading
import time

import pytest

from shadowkv.errors import UsageError
from shadowkv.metadata import MetadataStore
from shadowkv.metadata_service import MetadataClient, MetadataService
from shadowkv.server import ServerConfig, ServerProcess
from shadowkv.sessions import Router, loopback_pair
from shadowkv.store import StoreConfig
from shadowkv.views import SPACE_END, HashRange, OwnershipMap, full_space
from shadowkv.wire import (
    MSG_CTL_ERR,
    MSG_META_POLL,
    FrameAssembler,
    encode_frame,
    parse_ctl_err,
)

Q = SPACE_END // 4


def quarter_map() -> OwnershipMap:
    return OwnershipMap(
        [
            (HashRange(0, Q), 1),
            (HashRange(Q, 2 * Q), 2),
            (HashRange(2 * Q, 3 * Q), 3),
            (HashRange(3 * Q, SPACE_END), 4),
        ],
        {1: 1, 2: 1, 3: 1, 4: 1},
        map_version=1,
    )


@pytest.fixture
def service(tmp_path):
    store = MetadataStore(str(tmp_path / "meta" / "wal"))
    store.bootstrap(quarter_map())
    svc = MetadataService(store)
    svc.start()
    yield svc
    svc.stop()


@pytest.fixture
def client(service):
    c = MetadataClient(service.address)
    yield c
    c.close()


def test_get_map_and_poll_round_trip(service, client):
    m = client.get_ownership()
    assert m == service.store.get_ownership()
    assert client.poll_changes(m.map_version) is None

    mid = client.transfer_ranges(1, 2, [HashRange(0, Q // 2)])
    assert mid == 1
    newer = client.poll_changes(m.map_version)
    assert newer is not None
    assert newer.map_version == m.map_version + 1
    assert newer.owner_of(0) == (2, 2)
    assert newer == service.store.get_ownership()


def test_dependency_flags_and_sweep_over_wire(client):
    mid = client.transfer_ranges(3, 4, [HashRange(2 * Q, 2 * Q + 64)])
    dep = client.dependency(mid)
    assert (dep.source, dep.target) == (3, 4)
    assert dep.ranges == (HashRange(2 * Q, 2 * Q + 64),)
    assert (dep.source_view, dep.target_view) == (1, 1)
    assert not (dep.source_done or dep.target_done or dep.cancelled or dep.reverted)

    client.set_flag(mid, "source_done")
    client.set_flag(mid, "target_done")
    dep = client.dependency(mid)
    assert dep.source_done and dep.target_done

    assert client.sweep() == 1
    with pytest.raises(UsageError, match=r"\(2\)"):  # unknown id
        client.dependency(mid)


def test_rejected_transfer_keeps_connection_usable(client):
    with pytest.raises(UsageError, match=r"\(1\)"):
        client.transfer_ranges(9, 2, [HashRange(0, 16)])  # 9 owns nothing
    assert client.get_ownership().map_version == 1


def test_cancel_after_commit_rejected_over_wire(client):
    mid = client.transfer_ranges(1, 2, [HashRange(16, 32)])
    client.set_flag(mid, "source_done")
    client.set_flag(mid, "target_done")
    with pytest.raises(UsageError, match="already committed"):
        client.set_flag(mid, "cancelled")
    assert client.dependency(mid).committed()


def test_cancel_and_revert_over_wire(client):
    mid = client.transfer_ranges(2, 3, [HashRange(Q, Q + 1024)])
    assert client.get_ownership().owner_of(Q)[0] == 3
    client.set_flag(mid, "cancelled")
    client.revert_ranges(mid)
    m = client.get_ownership()
    assert m.owner_of(Q)[0] == 2
    assert client.dependency(mid).reverted
    # both flags moved the views forward twice
    assert m.views[2] == 3 and m.views[3] == 3


def test_unknown_request_kind_answers_error_then_closes(service):
    sock = socket.create_connection(service.address, timeout=5)
    sock.sendall(encode_frame(0x3F, b""))
    assembler = FrameAssembler()
    frames = []
    while not frames:
        chunk = sock.recv(1 << 16)
        assert chunk, "service closed without answering"
        assembler.feed(chunk)
        frames = list(assembler.frames())
    kind, body = frames[0]
    assert kind == MSG_CTL_ERR
    code, message = parse_ctl_err(body)
    assert code == 3  # malformed request
    assert "unknown metadata request" in message
    deadline = time.monotonic() + 5
    while sock.recv(1 << 16):  # service hangs up after the error frame
        assert time.monotonic() < deadline
    sock.close()


def test_malformed_body_answers_error_then_closes(service):
    sock = socket.create_connection(service.address, timeout=5)
    sock.sendall(encode_frame(MSG_META_POLL, b"abc"))
    assembler = FrameAssembler()
    frames = []
    while not frames:
        chunk = sock.recv(1 << 16)
        assert chunk
        assembler.feed(chunk)
        frames = list(assembler.frames())
    assert frames[0][0] == MSG_CTL_ERR
    sock.close()


def test_client_is_shareable_across_threads(client):
    errors = []

    def worker():
        try:
            for _ in range(25):
                m = client.get_ownership()
                assert m.map_version >= 1
                client.poll_changes(m.map_version)
        except Exception as exc:  # pragma: no cover - failure path
            errors.append(exc)

    threads = [threading.Thread(target=worker) for _ in range(4)]
    for t in threads:
        t.start()
    for t in threads:
        t.join()
    assert not errors


def test_server_and_router_run_on_remote_metadata(tmp_path):
    """A server and a router pointed at the TCP metadata service behave
    exactly as with an in-process store: same map, same view tags."""
    store = MetadataStore(str(tmp_path / "meta" / "wal"))
    store.bootstrap(OwnershipMap([(full_space(), 5)], {5: 1}, 1))
    svc = MetadataService(store)
    svc.start()
    server_meta = MetadataClient(svc.address)
    router_meta = MetadataClient(svc.address)
    server = ServerProcess(
        ServerConfig(5, StoreConfig(
            memory_budget=8 * 4096, page_size=4096, bucket_count=256,
            value_bound=256, data_dir=str(tmp_path / "log"),
        )),
        server_meta,
    )
    server.store.register_thread()
    server.store.protect()

    def dialer(server_id):
        assert server_id == 5
        client_end, server_end = loopback_pair()
        server.attach(server_end, 0)
        return client_end

    router = Router(router_meta, dialer)
    try:
        log = []
        router.upsert(1001, b"remote-meta", lambda s, v: log.append(("w", s, v)))
        router.read(1001, lambda s, v: log.append(("r", s, v)))
        deadline = time.monotonic() + 10
        while len(log) < 2:
            router.flush()
            server.step(0)
            router.poll()
            assert time.monotonic() < deadline
        assert log == [("w", 0, b""), ("r", 0, b"remote-meta")]
    finally:
        router.close()
        server.store.unprotect()
        server.close()
        server_meta.close()
        router_meta.close()
        svc.stop()
        store.close()
