"""Wire format: framing and message codecs, little-endian throughout.

Every message travels as one frame on a reliable ordered byte stream:

    {len: u32} {kind: u8} {body: len-1 bytes}

Request batches carry client operations tagged with a view number; response
batches carry per-request results in issue order plus completion records for
operations that went pending in an earlier batch. Control messages drive
migration and compaction between servers; 0x30-range messages talk to the
metadata service. Exact layouts, constants, and hex examples live in
docs/wire.md; the codec tests pin the bytes.

This module is pure: no sockets, no threads, no store types. Record payloads
reference hash-index coordinates (bucket, tag) when shipping indirection
records; peers verify index geometry during the transfer handshake.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

from .errors import ProtocolError
from .views import HashRange, OwnershipMap, _decode_hi, _encode_hi

# -- frame ---------------------------------------------------------------------

FRAME_LEN = struct.Struct("<I")
MAX_FRAME = 1 << 24  # 16 MB: far above any batch bound; guards length corruption

# -- message kinds ---------------------------------------------------------------

MSG_REQUEST_BATCH = 0x01
MSG_RESPONSE_BATCH = 0x02

MSG_MIGRATE = 0x10
MSG_PREP_FOR_TRANSFER = 0x11
MSG_TRANSFER_OWNERSHIP = 0x12
MSG_PUSH_RECORDS = 0x13
MSG_COMPLETE_MIGRATION = 0x14
MSG_CANCEL_MIGRATION = 0x15
MSG_COMPACTION_NOTICE = 0x16
MSG_CANCEL_COMPLETE = 0x17

MSG_CTL_OK = 0x20
MSG_CTL_ERR = 0x21

MSG_META_GET_MAP = 0x30
MSG_META_MAP = 0x31
MSG_META_POLL = 0x32
MSG_META_UNCHANGED = 0x33
MSG_META_TRANSFER = 0x34
MSG_META_MIGRATION_ID = 0x35
MSG_META_SET_FLAG = 0x36
MSG_META_REVERT = 0x37
MSG_META_BOOTSTRAP = 0x38
MSG_META_GET_DEP = 0x39
MSG_META_DEP_INFO = 0x3A
MSG_META_SWEEP = 0x3B

# -- request opcodes and statuses --------------------------------------------------

REQUEST_MAGIC = 0x42564B53  # bytes 53 4B 56 42 = "SKVB"

OP_READ = 1
OP_UPSERT = 2
OP_ADD = 3  # read-modify-write: 8-byte little-endian wrapping add, absent = 0

BATCH_OK = 0
BATCH_VIEW_REJECTED = 1

ST_OK = 0
ST_NOT_FOUND = 1
ST_PENDING = 2  # result follows later as a completion record
ST_REISSUE = 3  # ownership moved mid-flight; client must reissue

COMPLETION_ONLY_SEQ = 0xFFFFFFFF  # batch_seq of unsolicited completion batches

# record payload flags (migration transfer)
RF_TOMBSTONE = 0x01
RF_INDIRECTION = 0x02

# push kinds
PUSH_BULK = 0  # in-memory walk during the Migrate phase
PUSH_SCAN = 1  # sequential-scan baseline records
PUSH_BACK = 2  # cancellation: target returns its own writes to the source
PUSH_FORWARD = 3  # compaction: ex-owner forwards records to the current owner

_REQ_HEAD = struct.Struct("<IQQII")
_REQ_OP = struct.Struct("<BQI")
_RESP_HEAD = struct.Struct("<IBQII")
_RESP_RESULT = struct.Struct("<BI")
_RESP_COMPLETION = struct.Struct("<IIBI")
_RANGE = struct.Struct("<QQ")
_RECORD_HEAD = struct.Struct("<QB")
_RECORD_KV = struct.Struct("<QI")
_RECORD_IND = struct.Struct("<QQQQQQ")


def _need(buf, offset: int, count: int, what: str) -> None:
    if offset + count > len(buf):
        raise ProtocolError(f"truncated message: {what}")


# -- framing ---------------------------------------------------------------------


def encode_frame(kind: int, body: bytes) -> bytes:
    return FRAME_LEN.pack(1 + len(body)) + bytes([kind]) + body


class FrameAssembler:
    """Reassembles frames from an arbitrarily chunked byte stream."""

    def __init__(self, max_frame: int = MAX_FRAME):
        self._buf = bytearray()
        self._max = max_frame

    def feed(self, data: bytes) -> None:
        self._buf += data

    def frames(self):
        """Yield (kind, body bytes) for every complete frame buffered."""
        while True:
            if len(self._buf) < FRAME_LEN.size:
                return
            (length,) = FRAME_LEN.unpack_from(self._buf, 0)
            if length < 1 or length > self._max:
                raise ProtocolError(f"frame length {length} out of bounds")
            end = FRAME_LEN.size + length
            if len(self._buf) < end:
                return
            kind = self._buf[FRAME_LEN.size]
            body = bytes(self._buf[FRAME_LEN.size + 1 : end])
            del self._buf[:end]
            yield kind, body


# -- ranges (shared sub-encoding) ----------------------------------------------------


def _pack_ranges(ranges) -> bytes:
    out = [struct.pack("<I", len(ranges))]
    for r in ranges:
        out.append(_RANGE.pack(r.lo, _encode_hi(r.hi)))
    return b"".join(out)


def _parse_ranges(body, offset: int):
    _need(body, offset, 4, "range count")
    (count,) = struct.unpack_from("<I", body, offset)
    offset += 4
    _need(body, offset, count * _RANGE.size, "ranges")
    ranges = []
    for _ in range(count):
        lo, hi = _RANGE.unpack_from(body, offset)
        offset += _RANGE.size
        ranges.append(HashRange(lo, _decode_hi(hi)))
    return ranges, offset


def _pack_str(s: str) -> bytes:
    raw = s.encode("utf-8")
    if len(raw) > 0xFFFF:
        raise ProtocolError("string field exceeds 65535 bytes")
    return struct.pack("<H", len(raw)) + raw


def _parse_str(body, offset: int):
    _need(body, offset, 2, "string length")
    (n,) = struct.unpack_from("<H", body, offset)
    offset += 2
    _need(body, offset, n, "string bytes")
    return bytes(body[offset : offset + n]).decode("utf-8"), offset + n


# -- request batches ---------------------------------------------------------------


@dataclass(frozen=True)
class Request:
    opcode: int
    key: int
    value: bytes = b""


@dataclass(frozen=True)
class RequestBatch:
    session_id: int
    view: int
    batch_seq: int
    requests: tuple


def pack_request_batch(session_id: int, view: int, batch_seq: int, requests) -> bytes:
    out = [_REQ_HEAD.pack(REQUEST_MAGIC, session_id, view, batch_seq, len(requests))]
    for r in requests:
        out.append(_REQ_OP.pack(r.opcode, r.key, len(r.value)))
        out.append(r.value)
    return b"".join(out)


def parse_request_batch(body) -> RequestBatch:
    _need(body, 0, _REQ_HEAD.size, "request batch header")
    magic, session_id, view, batch_seq, count = _REQ_HEAD.unpack_from(body, 0)
    if magic != REQUEST_MAGIC:
        raise ProtocolError(f"bad request magic {magic:#010x}")
    if count < 1:
        raise ProtocolError("request batch must carry at least one request")
    offset = _REQ_HEAD.size
    requests = []
    for _ in range(count):
        _need(body, offset, _REQ_OP.size, "request header")
        opcode, key, value_len = _REQ_OP.unpack_from(body, offset)
        offset += _REQ_OP.size
        if opcode not in (OP_READ, OP_UPSERT, OP_ADD):
            raise ProtocolError(f"unknown request opcode {opcode}")
        _need(body, offset, value_len, "request value")
        value = bytes(body[offset : offset + value_len])
        offset += value_len
        requests.append(Request(opcode, key, value))
    if offset != len(body):
        raise ProtocolError("trailing bytes after request batch")
    return RequestBatch(session_id, view, batch_seq, tuple(requests))


# -- response batches -----------------------------------------------------------------


@dataclass(frozen=True)
class Result:
    status: int
    value: bytes = b""


@dataclass(frozen=True)
class Completion:
    orig_seq: int
    orig_idx: int
    status: int
    value: bytes = b""


@dataclass(frozen=True)
class ResponseBatch:
    batch_seq: int
    batch_status: int
    server_view: int
    results: tuple = ()
    completions: tuple = ()


def pack_response_batch(
    batch_seq: int,
    batch_status: int,
    server_view: int,
    results=(),
    completions=(),
) -> bytes:
    if batch_status != BATCH_OK and (results or completions):
        raise ProtocolError("rejected batches carry no payloads")
    out = [
        _RESP_HEAD.pack(batch_seq, batch_status, server_view, len(results), len(completions))
    ]
    for r in results:
        out.append(_RESP_RESULT.pack(r.status, len(r.value)))
        out.append(r.value)
    for c in completions:
        out.append(_RESP_COMPLETION.pack(c.orig_seq, c.orig_idx, c.status, len(c.value)))
        out.append(c.value)
    return b"".join(out)


def parse_response_batch(body) -> ResponseBatch:
    _need(body, 0, _RESP_HEAD.size, "response batch header")
    batch_seq, batch_status, server_view, nres, ncomp = _RESP_HEAD.unpack_from(body, 0)
    offset = _RESP_HEAD.size
    if batch_status != BATCH_OK and (nres or ncomp):
        raise ProtocolError("rejected batch with payloads")
    results = []
    for _ in range(nres):
        _need(body, offset, _RESP_RESULT.size, "result header")
        status, value_len = _RESP_RESULT.unpack_from(body, offset)
        offset += _RESP_RESULT.size
        _need(body, offset, value_len, "result value")
        results.append(Result(status, bytes(body[offset : offset + value_len])))
        offset += value_len
    completions = []
    for _ in range(ncomp):
        _need(body, offset, _RESP_COMPLETION.size, "completion header")
        orig_seq, orig_idx, status, value_len = _RESP_COMPLETION.unpack_from(body, offset)
        offset += _RESP_COMPLETION.size
        _need(body, offset, value_len, "completion value")
        completions.append(
            Completion(orig_seq, orig_idx, status, bytes(body[offset : offset + value_len]))
        )
        offset += value_len
    if offset != len(body):
        raise ProtocolError("trailing bytes after response batch")
    return ResponseBatch(batch_seq, batch_status, server_view, tuple(results), tuple(completions))


# -- record payloads (migration transfer) ------------------------------------------------


@dataclass(frozen=True)
class WireRecord:
    """One transferred record.

    Key-value records use key/value/tombstone; indirection records instead
    carry the index coordinates the stand-in must occupy at the receiver
    plus the address the stand-in points at. ``ind_log_id`` names the log
    that address lives in: after chained handoffs it can differ from the
    log of the server doing the pushing.
    """

    source_address: int
    flags: int = 0
    key: int = 0
    value: bytes = b""
    bucket: int = 0
    tag: int = 0
    ind_log_id: int = 0
    next_address: int = 0
    range: HashRange | None = None

    @property
    def is_indirection(self) -> bool:
        return bool(self.flags & RF_INDIRECTION)

    @property
    def is_tombstone(self) -> bool:
        return bool(self.flags & RF_TOMBSTONE)


def pack_record_payload(rec: WireRecord) -> bytes:
    head = _RECORD_HEAD.pack(rec.source_address, rec.flags)
    if rec.is_indirection:
        return head + _RECORD_IND.pack(
            rec.bucket,
            rec.tag,
            rec.ind_log_id,
            rec.next_address,
            rec.range.lo,
            _encode_hi(rec.range.hi),
        )
    return head + _RECORD_KV.pack(rec.key, len(rec.value)) + rec.value


def parse_record_payload(body, offset: int):
    _need(body, offset, _RECORD_HEAD.size, "record header")
    source_address, flags = _RECORD_HEAD.unpack_from(body, offset)
    offset += _RECORD_HEAD.size
    if flags & RF_INDIRECTION:
        _need(body, offset, _RECORD_IND.size, "indirection payload")
        bucket, tag, ind_log_id, next_address, lo, hi = _RECORD_IND.unpack_from(body, offset)
        offset += _RECORD_IND.size
        rec = WireRecord(
            source_address,
            flags,
            bucket=bucket,
            tag=tag,
            ind_log_id=ind_log_id,
            next_address=next_address,
            range=HashRange(lo, _decode_hi(hi)),
        )
        return rec, offset
    _need(body, offset, _RECORD_KV.size, "record key/length")
    key, value_len = _RECORD_KV.unpack_from(body, offset)
    offset += _RECORD_KV.size
    _need(body, offset, value_len, "record value")
    rec = WireRecord(source_address, flags, key=key, value=bytes(body[offset : offset + value_len]))
    return rec, offset + value_len


# -- migration control messages ------------------------------------------------------------


@dataclass(frozen=True)
class Migrate:
    migration_id: int
    target_id: int
    mode: int  # 0 = indirection, 1 = scan-log
    ranges: tuple
    target_addr: str


MODE_INDIRECTION = 0
MODE_SCAN_LOG = 1


def pack_migrate(m: Migrate) -> bytes:
    return (
        struct.pack("<QQB", m.migration_id, m.target_id, m.mode)
        + _pack_ranges(m.ranges)
        + _pack_str(m.target_addr)
    )


def parse_migrate(body) -> Migrate:
    _need(body, 0, 17, "migrate header")
    migration_id, target_id, mode = struct.unpack_from("<QQB", body, 0)
    ranges, offset = _parse_ranges(body, 17)
    target_addr, offset = _parse_str(body, offset)
    if offset != len(body):
        raise ProtocolError("trailing bytes after migrate")
    return Migrate(migration_id, target_id, mode, tuple(ranges), target_addr)


@dataclass(frozen=True)
class PrepForTransfer:
    migration_id: int
    source_id: int
    source_log_id: int
    bucket_count: int  # index geometry handshake: must match for indirections
    ranges: tuple


def pack_prep(p: PrepForTransfer) -> bytes:
    return (
        struct.pack("<QQQI", p.migration_id, p.source_id, p.source_log_id, p.bucket_count)
        + _pack_ranges(p.ranges)
    )


def parse_prep(body) -> PrepForTransfer:
    _need(body, 0, 28, "prep header")
    migration_id, source_id, source_log_id, bucket_count = struct.unpack_from("<QQQI", body, 0)
    ranges, offset = _parse_ranges(body, 28)
    if offset != len(body):
        raise ProtocolError("trailing bytes after prep")
    return PrepForTransfer(migration_id, source_id, source_log_id, bucket_count, tuple(ranges))


@dataclass(frozen=True)
class TransferOwnership:
    migration_id: int
    records: tuple  # sampled hot records, newest first per key


def pack_transfer_ownership(t: TransferOwnership) -> bytes:
    out = [struct.pack("<QI", t.migration_id, len(t.records))]
    for rec in t.records:
        out.append(pack_record_payload(rec))
    return b"".join(out)


def parse_transfer_ownership(body) -> TransferOwnership:
    _need(body, 0, 12, "transfer header")
    migration_id, count = struct.unpack_from("<QI", body, 0)
    offset = 12
    records = []
    for _ in range(count):
        rec, offset = parse_record_payload(body, offset)
        records.append(rec)
    if offset != len(body):
        raise ProtocolError("trailing bytes after transfer")
    return TransferOwnership(migration_id, tuple(records))


@dataclass(frozen=True)
class PushRecords:
    """Record shipment. Each group is one chain segment, newest record first
    and its indirection stand-in (if any) last; receivers install groups
    bottom-up so chain order survives the hop."""

    migration_id: int
    kind: int  # PUSH_BULK | PUSH_SCAN | PUSH_BACK | PUSH_FORWARD
    sender_log_id: int
    groups: tuple  # tuple of tuples of WireRecord


def pack_push_records(p: PushRecords) -> bytes:
    out = [struct.pack("<QBQI", p.migration_id, p.kind, p.sender_log_id, len(p.groups))]
    for group in p.groups:
        out.append(struct.pack("<I", len(group)))
        for rec in group:
            out.append(pack_record_payload(rec))
    return b"".join(out)


def parse_push_records(body) -> PushRecords:
    _need(body, 0, 21, "push header")
    migration_id, kind, sender_log_id, ngroups = struct.unpack_from("<QBQI", body, 0)
    if kind not in (PUSH_BULK, PUSH_SCAN, PUSH_BACK, PUSH_FORWARD):
        raise ProtocolError(f"unknown push kind {kind}")
    offset = 21
    groups = []
    for _ in range(ngroups):
        _need(body, offset, 4, "group count")
        (nrec,) = struct.unpack_from("<I", body, offset)
        offset += 4
        group = []
        for _ in range(nrec):
            rec, offset = parse_record_payload(body, offset)
            group.append(rec)
        groups.append(tuple(group))
    if offset != len(body):
        raise ProtocolError("trailing bytes after push")
    return PushRecords(migration_id, kind, sender_log_id, tuple(groups))


def pack_migration_id(migration_id: int) -> bytes:
    return struct.pack("<Q", migration_id)


def parse_migration_id(body) -> int:
    if len(body) != 8:
        raise ProtocolError("migration id message must be exactly 8 bytes")
    return struct.unpack("<Q", body)[0]


@dataclass(frozen=True)
class CompactionNotice:
    log_id: int
    up_to: int  # indirections into [0, up_to) of log_id are now dangling


def pack_compaction_notice(n: CompactionNotice) -> bytes:
    return struct.pack("<QQ", n.log_id, n.up_to)


def parse_compaction_notice(body) -> CompactionNotice:
    if len(body) != 16:
        raise ProtocolError("compaction notice must be exactly 16 bytes")
    return CompactionNotice(*struct.unpack("<QQ", body))


# -- control replies ----------------------------------------------------------------------


def pack_ctl_ok(a: int = 0, b: int = 0) -> bytes:
    return struct.pack("<QQ", a, b)


def parse_ctl_ok(body):
    if len(body) != 16:
        raise ProtocolError("ctl-ok must be exactly 16 bytes")
    return struct.unpack("<QQ", body)


def pack_ctl_err(code: int, message: str) -> bytes:
    return struct.pack("<B", code) + _pack_str(message)


def parse_ctl_err(body):
    _need(body, 0, 1, "error code")
    code = body[0]
    message, offset = _parse_str(body, 1)
    if offset != len(body):
        raise ProtocolError("trailing bytes after ctl-err")
    return code, message


ERR_REJECTED = 1  # precondition failed (ownership, phase, geometry)
ERR_UNKNOWN_ID = 2
ERR_BAD_MESSAGE = 3
ERR_INTERNAL = 4


# -- metadata service messages ---------------------------------------------------------------


def pack_meta_map(owner_map: OwnershipMap) -> bytes:
    return owner_map.encode()


def parse_meta_map(body) -> OwnershipMap:
    return OwnershipMap.decode(body)


def pack_meta_poll(since_version: int) -> bytes:
    return struct.pack("<Q", since_version)


def parse_meta_poll(body) -> int:
    if len(body) != 8:
        raise ProtocolError("poll must be exactly 8 bytes")
    return struct.unpack("<Q", body)[0]


@dataclass(frozen=True)
class MetaTransfer:
    source: int
    target: int
    ranges: tuple


def pack_meta_transfer(t: MetaTransfer) -> bytes:
    return struct.pack("<QQ", t.source, t.target) + _pack_ranges(t.ranges)


def parse_meta_transfer(body) -> MetaTransfer:
    _need(body, 0, 16, "transfer header")
    source, target = struct.unpack_from("<QQ", body, 0)
    ranges, offset = _parse_ranges(body, 16)
    if offset != len(body):
        raise ProtocolError("trailing bytes after meta transfer")
    return MetaTransfer(source, target, tuple(ranges))


FLAG_CODE_SOURCE_DONE = 1
FLAG_CODE_TARGET_DONE = 2
FLAG_CODE_CANCELLED = 3
_FLAG_CODE_NAMES = {1: "source_done", 2: "target_done", 3: "cancelled"}
_FLAG_NAME_CODES = {v: k for k, v in _FLAG_CODE_NAMES.items()}


def pack_meta_set_flag(migration_id: int, which: str) -> bytes:
    if which not in _FLAG_NAME_CODES:
        raise ProtocolError(f"unknown dependency flag {which!r}")
    return struct.pack("<QB", migration_id, _FLAG_NAME_CODES[which])


def parse_meta_set_flag(body):
    if len(body) != 9:
        raise ProtocolError("set-flag must be exactly 9 bytes")
    migration_id, code = struct.unpack("<QB", body)
    if code not in _FLAG_CODE_NAMES:
        raise ProtocolError(f"unknown dependency flag code {code}")
    return migration_id, _FLAG_CODE_NAMES[code]


@dataclass(frozen=True)
class MetaDepInfo:
    migration_id: int
    source: int
    target: int
    source_view: int
    target_view: int
    flags: int  # bit 0: source_done, 1: target_done, 2: cancelled, 3: reverted
    ranges: tuple


DEP_SOURCE_DONE = 1
DEP_TARGET_DONE = 2
DEP_CANCELLED = 4
DEP_REVERTED = 8


def pack_meta_dep_info(d: MetaDepInfo) -> bytes:
    return (
        struct.pack(
            "<QQQQQB", d.migration_id, d.source, d.target, d.source_view, d.target_view, d.flags
        )
        + _pack_ranges(d.ranges)
    )


def parse_meta_dep_info(body) -> MetaDepInfo:
    _need(body, 0, 41, "dep info header")
    migration_id, source, target, source_view, target_view, flags = struct.unpack_from(
        "<QQQQQB", body, 0
    )
    ranges, offset = _parse_ranges(body, 41)
    if offset != len(body):
        raise ProtocolError("trailing bytes after dep info")
    return MetaDepInfo(migration_id, source, target, source_view, target_view, flags, tuple(ranges))
