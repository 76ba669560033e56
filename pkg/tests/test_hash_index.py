"""Hash index: packing, two-phase insert, CAS semantics, model equivalence."""

from __future__ import annotations

import random
import threading

import pytest

from shadowkv._hash import bucket_of, tag_of
from shadowkv.errors import ResourceExhausted
from shadowkv.hash_index import (
    ADDRESS_MASK,
    SLOTS_PER_BUCKET,
    TENTATIVE_BIT,
    HashIndex,
    entry_address,
    entry_is_tentative,
    entry_tag,
    pack_entry,
)


def make_hash(bucket: int, tag: int) -> int:
    """Compose a raw hash with chosen bucket (low bits) and tag (bits 48..61)."""
    return (tag << 48) | bucket


def test_entry_word_packing():
    w = pack_entry(0x3FFF, 0xABCDEF012345, tentative=True)
    assert entry_tag(w) == 0x3FFF
    assert entry_address(w) == 0xABCDEF012345
    assert entry_is_tentative(w)
    assert pack_entry(0, 0) != 0  # occupancy marker keeps it distinct from free
    assert entry_address(pack_entry(7, 0)) == 0


def test_empty_index_finds_nothing():
    idx = HashIndex(bucket_count=16)
    assert idx.find_entry(make_hash(3, 9)) is None


def test_create_then_find_same_slot_address_zero():
    idx = HashIndex(bucket_count=16)
    h = make_hash(5, 77)
    created = idx.find_or_create_entry(h)
    assert created.address == 0
    found = idx.find_entry(h)
    assert found is not None and found.offset == created.offset


def test_same_bucket_distinct_tags_get_distinct_entries():
    idx = HashIndex(bucket_count=16)
    h1, h2 = make_hash(4, 100), make_hash(4, 200)
    e1 = idx.find_or_create_entry(h1)
    e2 = idx.find_or_create_entry(h2)
    assert e1.offset != e2.offset
    assert idx.find_entry(h1).offset == e1.offset
    assert idx.find_entry(h2).offset == e2.offset


def test_eighth_tag_spills_to_overflow_bucket():
    idx = HashIndex(bucket_count=4)
    hashes = [make_hash(2, 10 + i) for i in range(SLOTS_PER_BUCKET + 1)]
    handles = [idx.find_or_create_entry(h) for h in hashes]
    # Last one lives outside the primary region.
    assert handles[-1].offset >= idx.bucket_count * 8
    for h, e in zip(hashes, handles):
        assert idx.find_entry(h).offset == e.offset


def test_create_delete_create_reuses_slot():
    idx = HashIndex(bucket_count=8)
    h = make_hash(1, 5)
    e1 = idx.find_or_create_entry(h)
    idx.delete_entry(e1)
    assert idx.find_entry(h) is None
    e2 = idx.find_or_create_entry(h)
    assert e2.offset == e1.offset


def test_try_update_entry_semantics():
    idx = HashIndex(bucket_count=8)
    h = make_hash(6, 30)
    e = idx.find_or_create_entry(h)
    empty = e.load()
    desired = pack_entry(tag_of(h), 4096)
    assert idx.try_update_entry(e, empty, desired)
    assert e.address == 4096
    # Stale expected fails and leaves the entry unchanged.
    assert not idx.try_update_entry(e, empty, pack_entry(tag_of(h), 8192))
    assert e.address == 4096


def test_racing_updates_exactly_one_wins():
    idx = HashIndex(bucket_count=8)
    h = make_hash(0, 1)
    e = idx.find_or_create_entry(h)
    rounds = 500
    wins = [0, 0]

    barrier = threading.Barrier(2)

    def racer(i):
        for r in range(rounds):
            barrier.wait()
            expected = pack_entry(1, r * 2)
            if idx.try_update_entry(e, expected, pack_entry(1, r * 2 + 1)):
                wins[i] += 1
            barrier.wait()
            if i == 0:  # reset for the next round
                idx.try_update_entry(e, pack_entry(1, r * 2 + 1), pack_entry(1, (r + 1) * 2))

    idx.try_update_entry(e, e.load(), pack_entry(1, 0))
    ts = [threading.Thread(target=racer, args=(i,)) for i in range(2)]
    for t in ts:
        t.start()
    for t in ts:
        t.join()
    assert wins[0] + wins[1] == rounds


def test_concurrent_create_same_hash_single_slot():
    idx = HashIndex(bucket_count=8)
    h = make_hash(3, 42)
    results = []
    barrier = threading.Barrier(8)

    def creator():
        barrier.wait()
        results.append(idx.find_or_create_entry(h).offset)

    ts = [threading.Thread(target=creator) for _ in range(8)]
    for t in ts:
        t.start()
    for t in ts:
        t.join()
    assert len(set(results)) == 1
    _assert_no_duplicate_entries(idx)


def test_concurrent_mixed_tags_no_duplicates():
    idx = HashIndex(bucket_count=4, overflow_limit=64)
    rng = random.Random(3)
    hashes = [make_hash(rng.randrange(4), rng.randrange(40)) for _ in range(300)]
    barrier = threading.Barrier(6)
    failures = []

    def worker(seed):
        r = random.Random(seed)
        barrier.wait()
        try:
            for _ in range(400):
                idx.find_or_create_entry(hashes[r.randrange(len(hashes))])
        except Exception as exc:  # pragma: no cover - surfaced by assert below
            failures.append(exc)

    ts = [threading.Thread(target=worker, args=(s,)) for s in range(6)]
    for t in ts:
        t.start()
    for t in ts:
        t.join()
    assert not failures
    _assert_no_duplicate_entries(idx)


def _assert_no_duplicate_entries(idx: HashIndex) -> None:
    for b in range(idx.bucket_count):
        tags = [entry_tag(w) for _, w in idx.chain_entries(b)]
        assert len(tags) == len(set(tags)), f"duplicate tag in bucket {b}"
        for _, w in idx.chain_entries(b):
            assert not (w & TENTATIVE_BIT)


def test_model_equivalence_fuzz():
    """Single-threaded random ops match a (bucket, tag) -> address map."""
    idx = HashIndex(bucket_count=32, overflow_limit=512)
    model: dict[tuple[int, int], int] = {}
    rng = random.Random(1234)
    hash_pool = [make_hash(rng.randrange(32), rng.randrange(1 << 14)) for _ in range(600)]

    def key_of(h):
        return (bucket_of(h, idx.bucket_mask), tag_of(h))

    for step in range(100_000):
        h = hash_pool[rng.randrange(len(hash_pool))]
        k = key_of(h)
        op = rng.randrange(4)
        if op == 0:  # find
            e = idx.find_entry(h)
            if k in model:
                assert e is not None and e.address == model[k]
            else:
                assert e is None
        elif op == 1:  # create
            e = idx.find_or_create_entry(h)
            if k in model:
                assert e.address == model[k]
            else:
                assert e.address == 0
                model[k] = 0
        elif op == 2 and k in model:  # update via CAS
            e = idx.find_entry(h)
            new_addr = rng.randrange(1, ADDRESS_MASK)
            assert idx.try_update_entry(e, e.load(), pack_entry(tag_of(h), new_addr))
            model[k] = new_addr
        elif op == 3 and k in model:  # delete
            idx.delete_entry(idx.find_entry(h))
            del model[k]
    # Final sweep: everything in the model is findable with the right address.
    for h in hash_pool:
        k = key_of(h)
        e = idx.find_entry(h)
        if k in model:
            assert e is not None and e.address == model[k]
        else:
            assert e is None


def test_overflow_limit_resource_exhausted():
    idx = HashIndex(bucket_count=2, overflow_limit=1)
    with pytest.raises(ResourceExhausted):
        for i in range(3 * SLOTS_PER_BUCKET + 2):
            idx.find_or_create_entry(make_hash(0, i))
