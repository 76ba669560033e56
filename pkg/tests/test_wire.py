"""Wire codec: byte-exact layouts, framing, and malformed-input rejection."""

from __future__ import annotations

import struct

import pytest

import shadowkv.wire as wire
from shadowkv.errors import ProtocolError
from shadowkv.views import SPACE_END, HashRange, OwnershipMap
from shadowkv.wire import (
    BATCH_OK,
    BATCH_VIEW_REJECTED,
    OP_ADD,
    OP_READ,
    OP_UPSERT,
    PUSH_BULK,
    PUSH_FORWARD,
    RF_INDIRECTION,
    RF_TOMBSTONE,
    ST_NOT_FOUND,
    ST_OK,
    ST_PENDING,
    Completion,
    FrameAssembler,
    Request,
    Result,
    WireRecord,
    encode_frame,
)


# -- framing ------------------------------------------------------------------


def test_frame_round_trip_single():
    frame = encode_frame(0x42, b"hello")
    asm = FrameAssembler()
    asm.feed(frame)
    assert list(asm.frames()) == [(0x42, b"hello")]
    assert list(asm.frames()) == []  # consumed


def test_frame_reassembly_byte_by_byte():
    frames = encode_frame(1, b"a" * 7) + encode_frame(2, b"") + encode_frame(3, b"xyz")
    asm = FrameAssembler()
    got = []
    for i in range(len(frames)):
        asm.feed(frames[i : i + 1])
        got.extend(asm.frames())
    assert got == [(1, b"a" * 7), (2, b""), (3, b"xyz")]


def test_frame_length_bounds():
    asm = FrameAssembler(max_frame=64)
    asm.feed(struct.pack("<I", 65) + b"\x01" + b"x" * 64)
    with pytest.raises(ProtocolError, match="length"):
        list(asm.frames())
    asm2 = FrameAssembler()
    asm2.feed(struct.pack("<I", 0))
    with pytest.raises(ProtocolError, match="length"):
        list(asm2.frames())


# -- request batches -------------------------------------------------------------


def test_request_batch_round_trip():
    reqs = [
        Request(OP_READ, 0xDEAD),
        Request(OP_UPSERT, 7, b"value-bytes"),
        Request(OP_ADD, 1 << 63, struct.pack("<Q", 5)),
    ]
    body = wire.pack_request_batch(11, 3, 42, reqs)
    batch = wire.parse_request_batch(body)
    assert batch.session_id == 11
    assert batch.view == 3
    assert batch.batch_seq == 42
    assert list(batch.requests) == reqs


def test_request_batch_pinned_bytes():
    """The exact bytes of a minimal batch; docs/wire.md quotes this vector."""
    body = wire.pack_request_batch(1, 2, 3, [Request(OP_UPSERT, 0x1122334455667788, b"hi")])
    expected = bytes.fromhex(
        "534b5642"  # magic "SKVB"
        "0100000000000000"  # session_id = 1
        "0200000000000000"  # view = 2
        "03000000"  # batch_seq = 3
        "01000000"  # count = 1
        "02"  # opcode = upsert
        "8877665544332211"  # key
        "02000000"  # value_len = 2
        "6869"  # "hi"
    )
    assert body == expected


def test_request_batch_rejects_bad_magic_and_opcode_and_trailing():
    good = wire.pack_request_batch(1, 1, 1, [Request(OP_READ, 5)])
    with pytest.raises(ProtocolError, match="magic"):
        wire.parse_request_batch(b"\x00" + good[1:])
    bad_op = bytearray(good)
    bad_op[wire._REQ_HEAD.size] = 9
    with pytest.raises(ProtocolError, match="opcode"):
        wire.parse_request_batch(bytes(bad_op))
    with pytest.raises(ProtocolError, match="trailing"):
        wire.parse_request_batch(good + b"\x00")
    with pytest.raises(ProtocolError, match="truncated"):
        wire.parse_request_batch(good[:-1])
    with pytest.raises(ProtocolError, match="at least one"):
        wire.parse_request_batch(wire._REQ_HEAD.pack(wire.REQUEST_MAGIC, 1, 1, 1, 0))


# -- response batches ---------------------------------------------------------------


def test_response_batch_round_trip_with_completions():
    results = [Result(ST_OK, b"v1"), Result(ST_NOT_FOUND), Result(ST_PENDING)]
    comps = [Completion(40, 2, ST_OK, b"late")]
    body = wire.pack_response_batch(9, BATCH_OK, 4, results, comps)
    resp = wire.parse_response_batch(body)
    assert resp.batch_seq == 9
    assert resp.server_view == 4
    assert list(resp.results) == results
    assert list(resp.completions) == comps


def test_response_rejection_is_all_or_nothing():
    body = wire.pack_response_batch(5, BATCH_VIEW_REJECTED, 7)
    resp = wire.parse_response_batch(body)
    assert resp.batch_status == BATCH_VIEW_REJECTED
    assert resp.results == () and resp.completions == ()
    with pytest.raises(ProtocolError):
        wire.pack_response_batch(5, BATCH_VIEW_REJECTED, 7, [Result(ST_OK)])
    forged = wire._RESP_HEAD.pack(5, BATCH_VIEW_REJECTED, 7, 1, 0) + wire._RESP_RESULT.pack(0, 0)
    with pytest.raises(ProtocolError, match="payload"):
        wire.parse_response_batch(forged)


def test_response_batch_pinned_bytes():
    body = wire.pack_response_batch(7, BATCH_OK, 5, [Result(ST_OK, b"ok")])
    expected = bytes.fromhex(
        "07000000"  # batch_seq = 7
        "00"  # batch_status = ok
        "0500000000000000"  # server_view = 5
        "01000000"  # result_count = 1
        "00000000"  # completion_count = 0
        "00"  # status = ok
        "02000000"  # value_len = 2
        "6f6b"  # "ok"
    )
    assert body == expected


# -- record payloads ------------------------------------------------------------------


def test_record_payload_round_trips():
    kv = WireRecord(source_address=0x1000, key=42, value=b"abc")
    tomb = WireRecord(source_address=0x2000, flags=RF_TOMBSTONE, key=43)
    ind = WireRecord(
        source_address=0x3000,
        flags=RF_INDIRECTION,
        bucket=17,
        tag=0x2A5,
        next_address=0x3000,
        range=HashRange(1 << 62, SPACE_END),
    )
    for rec in (kv, tomb, ind):
        blob = wire.pack_record_payload(rec)
        parsed, end = wire.parse_record_payload(blob, 0)
        assert end == len(blob)
        assert parsed == rec
    assert ind.is_indirection and not kv.is_indirection
    assert tomb.is_tombstone


def test_push_records_round_trip_groups():
    g1 = (
        WireRecord(source_address=0x500, key=1, value=b"x"),
        WireRecord(
            source_address=0x80,
            flags=RF_INDIRECTION,
            bucket=3,
            tag=9,
            next_address=0x80,
            range=HashRange(0, 1 << 32),
        ),
    )
    g2 = (WireRecord(source_address=0x600, key=2, value=b"yy", flags=RF_TOMBSTONE),)
    push = wire.PushRecords(77, PUSH_BULK, 12, (g1, g2))
    parsed = wire.parse_push_records(wire.pack_push_records(push))
    assert parsed == push
    fwd = wire.PushRecords(0, PUSH_FORWARD, 12, (g2,))
    assert wire.parse_push_records(wire.pack_push_records(fwd)) == fwd
    bad = bytearray(wire.pack_push_records(push))
    bad[8] = 9  # unknown push kind
    with pytest.raises(ProtocolError, match="push kind"):
        wire.parse_push_records(bytes(bad))


# -- migration control --------------------------------------------------------------------


def test_migrate_round_trip():
    m = wire.Migrate(
        migration_id=0,
        target_id=2,
        mode=wire.MODE_SCAN_LOG,
        ranges=(HashRange(0, 1 << 63), HashRange(1 << 63, SPACE_END)),
        target_addr="127.0.0.1:7001",
    )
    assert wire.parse_migrate(wire.pack_migrate(m)) == m


def test_prep_and_transfer_round_trip():
    p = wire.PrepForTransfer(5, 1, 10, 1 << 16, (HashRange(4, 8),))
    assert wire.parse_prep(wire.pack_prep(p)) == p
    t = wire.TransferOwnership(5, (WireRecord(source_address=64, key=9, value=b"hot"),))
    assert wire.parse_transfer_ownership(wire.pack_transfer_ownership(t)) == t


def test_cancel_and_notices_round_trip():
    assert wire.parse_migration_id(wire.pack_migration_id(88)) == 88
    n = wire.CompactionNotice(4, 1 << 20)
    assert wire.parse_compaction_notice(wire.pack_compaction_notice(n)) == n
    with pytest.raises(ProtocolError):
        wire.parse_migration_id(b"\x00" * 7)


def test_ctl_replies():
    assert wire.parse_ctl_ok(wire.pack_ctl_ok(6, 7)) == (6, 7)
    code, msg = wire.parse_ctl_err(wire.pack_ctl_err(wire.ERR_REJECTED, "no such range"))
    assert (code, msg) == (wire.ERR_REJECTED, "no such range")


# -- metadata messages -------------------------------------------------------------------------


def test_meta_messages_round_trip():
    m = OwnershipMap.single_owner(3)
    assert wire.parse_meta_map(wire.pack_meta_map(m)) == m
    assert wire.parse_meta_poll(wire.pack_meta_poll(12)) == 12
    t = wire.MetaTransfer(1, 2, (HashRange(0, 16),))
    assert wire.parse_meta_transfer(wire.pack_meta_transfer(t)) == t
    assert wire.parse_meta_set_flag(wire.pack_meta_set_flag(4, "cancelled")) == (4, "cancelled")
    with pytest.raises(ProtocolError):
        wire.pack_meta_set_flag(4, "bogus")
    d = wire.MetaDepInfo(4, 1, 2, 3, 0, wire.DEP_CANCELLED, (HashRange(0, 8),))
    assert wire.parse_meta_dep_info(wire.pack_meta_dep_info(d)) == d


def test_full_space_range_survives_the_wire():
    """hi = 2^64 does not fit in u64; the codec must still round-trip it."""
    m = wire.Migrate(0, 1, 0, (HashRange(0, SPACE_END),), "a:1")
    parsed = wire.parse_migrate(wire.pack_migrate(m))
    assert parsed.ranges[0].hi == SPACE_END
