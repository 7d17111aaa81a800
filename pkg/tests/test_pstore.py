import csv
import struct

import pytest

from pmprims.pstore import (
    Arena, ArenaExhausted, ArenaCorrupt, CrashPlan, CrashPointError, OutOfRange, PRef,
    TxError, UnsnapshottedWrite)
from pmprims.oracle import CrashReplayer, torn_words

U64 = struct.Struct("<Q")


def heap(arena, n=1024):
    return arena.allocate(n)


def test_allocation_is_aligned_and_disjoint(arena):
    a = arena.allocate(1024, 64)
    b = arena.allocate(256, 64)
    c = arena.allocate(256, 64)
    assert a.offset % 64 == 0 and b.offset % 64 == 0
    assert b.offset >= a.offset + a.length
    assert c.offset >= b.offset + b.length


def test_allocation_beyond_remaining_raises(arena):
    with pytest.raises(ArenaExhausted):
        arena.allocate(arena.remaining + 64)


@pytest.mark.parametrize("size,align", [(0, 64), (64, 3), (64, 8192)])
def test_allocation_rejects_bad_arguments(arena, size, align):
    with pytest.raises(ValueError):
        arena.allocate(size, align)


def test_access_outside_reference_raises(arena):
    r = heap(arena, 64)
    with pytest.raises(OutOfRange):
        arena.store(r, 60, b"\0" * 8)
    with pytest.raises(OutOfRange):
        r.sub(32, 64)


def test_straddling_store_dirties_two_lines(arena):
    r = heap(arena)
    arena.reset_stats()
    arena.store(r, 56, b"x" * 24)
    s = arena.stats()
    assert s.modified_bytes == 24
    line = r.offset // 64
    assert arena.line_state(line) and arena.line_state(line + 1)
    assert not arena.line_state(line + 2)


def test_aligned_word_store_dirties_one_line(arena):
    r = heap(arena)
    arena.store(r, 8, b"y" * 8)
    line = r.offset // 64
    assert [bool(arena.line_state(line + i)) for i in range(3)] == [True, False, False]


def test_flush_counts_lines_and_is_idempotent(arena):
    r = heap(arena)
    arena.store(r, 0, b"a" * 128)
    arena.reset_stats()
    arena.flush(r, 0, 128)
    s = arena.stats()
    assert (s.flushed_lines, s.written_bytes) == (2, 128)
    arena.reset_stats()
    arena.flush(r, 0, 128)
    arena.flush(r, 256, 64)
    assert arena.stats().flushed_lines == 0


def test_partial_flush_leaves_other_lines_dirty(arena):
    r = heap(arena)
    arena.store(r, 0, b"b" * 192)
    arena.reset_stats()
    arena.flush(r, 64, 1)
    line = r.offset // 64
    assert arena.stats().flushed_lines == 1
    assert arena.line_state(line) and arena.line_state(line + 2)


def test_fence_with_nothing_pending_only_counts(arena):
    arena.reset_stats()
    arena.fence()
    s = arena.stats()
    assert s.fences == 1
    assert (s.modified_bytes, s.flushed_lines, s.lines_read) == (0, 0, 0)


def test_fenced_flush_survives_crash(arena):
    r = heap(arena)
    arena.store(r, 0, b"new!" * 2)
    arena.flush(r, 0, 8)
    arena.fence()
    after = arena.crash()
    assert after.peek(r, 0, 8) == b"new!" * 2


def test_unflushed_store_is_lost_on_crash(arena):
    r = heap(arena)
    arena.store(r, 0, b"gone" * 2)
    assert arena.crash().peek(r, 0, 8) == bytes(8)


def test_flushed_but_unfenced_store_is_lost_on_deterministic_crash(arena):
    r = heap(arena)
    arena.store(r, 0, b"gone" * 2)
    arena.flush(r, 0, 8)
    assert arena.crash().peek(r, 0, 8) == bytes(8)


def test_lines_read_counts_distinct_lines(arena):
    r = heap(arena)
    arena.reset_stats()
    arena.load(r, 0, 8)
    arena.load(r, 16, 8)
    assert arena.stats().lines_read == 1
    arena.load(r, 60, 72)
    assert arena.stats().lines_read == 3
    arena.reset_stats()
    arena.load(r, 0, 8)
    assert arena.stats().lines_read == 1


def test_peek_and_poke_are_not_counted(arena):
    r = heap(arena)
    arena.reset_stats()
    arena.poke(r, 0, b"z" * 16)
    assert arena.peek(r, 0, 16) == b"z" * 16
    s = arena.stats()
    assert (s.modified_bytes, s.lines_read) == (0, 0)


def test_snapshot_logs_line_plus_overhead(arena):
    r = heap(arena)
    arena.reset_stats()
    with arena.transaction():
        arena.tx_snapshot(r, 0, 64)
        arena.store(r, 0, b"q" * 64)
    assert arena.stats().log_bytes == 80


def test_snapshot_of_same_range_is_logged_once(arena):
    r = heap(arena)
    arena.reset_stats()
    with arena.transaction():
        arena.tx_snapshot(r, 0, 64)
        arena.tx_snapshot(r, 0, 64)
        arena.tx_snapshot(r, 16, 8)
        arena.store(r, 0, b"q" * 64)
    assert arena.stats().log_bytes == 80


def test_store_without_snapshot_in_tx_raises(arena):
    r = heap(arena)
    arena.tx_begin()
    with pytest.raises(UnsnapshottedWrite):
        arena.store(r, 0, b"\1" * 8)
    arena.tx_abort()


def test_nested_and_unmatched_tx_calls_raise(arena):
    with pytest.raises(TxError):
        arena.tx_commit()
    with pytest.raises(TxError):
        arena.tx_snapshot(heap(arena), 0, 8)
    arena.tx_begin()
    with pytest.raises(TxError):
        arena.tx_begin()
    arena.tx_abort()


def test_abort_restores_pre_image(arena):
    r = heap(arena)
    arena.poke(r, 0, b"old!" * 4)
    arena.tx_begin()
    arena.tx_snapshot(r, 0, 16)
    arena.store(r, 0, b"new!" * 4)
    arena.tx_abort()
    assert arena.peek(r, 0, 16) == b"old!" * 4
    assert not arena.in_tx


def test_crash_before_commit_rolls_back(arena):
    r = heap(arena)
    arena.store(r, 0, b"old!" * 4)
    arena.persist(r, 0, 16)
    arena.tx_begin()
    arena.tx_snapshot(r, 0, 16)
    arena.store(r, 0, b"new!" * 4)
    arena.persist(r, 0, 16)
    image = arena.crash_image()
    assert arena.crash().peek(r, 0, 16) == b"old!" * 4
    reopened = Arena(len(image), _image=image, core_cls=arena._core_cls)
    assert reopened.recover() is True
    assert reopened.peek(r, 0, 16) == b"old!" * 4


def test_committed_tx_survives_crash(arena):
    r = heap(arena)
    with arena.transaction():
        arena.tx_snapshot(r, 0, 16)
        arena.store(r, 0, b"new!" * 4)
    after = arena.crash()
    assert not after.in_tx and after.recover() is False
    assert after.peek(r, 0, 16) == b"new!" * 4


def test_crash_point_replay_is_deterministic(arena):
    r = heap(arena)
    arena.begin_trace()
    for i in range(4):
        arena.store(r, 64 * i, U64.pack(i + 1))
        arena.flush(r, 64 * i, 8)
        arena.fence()
    n = len(arena.events)
    assert n == 12
    for p in range(n + 1):
        a = arena.crash_image(CrashPlan(p))
        b = arena.crash_image(CrashPlan(p))
        assert a == b
        durable_words = sum(a[r.offset + 64 * i] != 0 for i in range(4))
        assert durable_words == p // 3


def test_crash_point_outside_trace_raises(arena):
    arena.begin_trace()
    arena.fence()
    with pytest.raises(CrashPointError):
        arena.crash_image(CrashPlan(5))


def test_replayer_agrees_with_arena(arena):
    r = heap(arena)
    arena.store(r, 0, b"pre-" * 4)
    arena.flush(r, 0, 16)
    arena.begin_trace()
    arena.store(r, 8, b"abcdefgh")
    arena.fence()
    arena.store(r, 70, b"xyz")
    arena.flush(r, 64, 64)
    arena.store(r, 200, b"12345678")
    arena.fence()
    rep = CrashReplayer.from_arena(arena)
    for p in range(len(arena.events) + 1):
        assert rep.image(p) == arena.crash_image(CrashPlan(p))


def test_adversarial_crash_never_tears_a_word(arena):
    r = heap(arena, 64)
    old = bytes(range(64))
    new = bytes(255 - b for b in range(64))
    arena.poke(r, 0, old)
    arena.store(r, 0, new)
    seen = set()
    for seed in range(64):
        img = arena.crash_image(CrashPlan(None, "adversarial", seed))
        region = img[r.offset:r.offset + 64]
        assert torn_words(region, old, new) == []
        seen.add(region)
    assert len(seen) > 2


def test_crash_plan_rejects_unknown_mode():
    with pytest.raises(ValueError):
        CrashPlan(0, "sideways")


def test_offsets_survive_crash_and_image_roundtrip(arena, tmp_path, core_cls):
    r = arena.allocate(512)
    arena.store(r, 0, b"keep" * 2)
    arena.persist(r, 0, 8)
    path = tmp_path / "arena.img"
    arena.dump_image(path)
    again = Arena.load_image(path, core_cls=core_cls)
    assert again.peek(r, 0, 8) == b"keep" * 2
    assert again.cursor == arena.cursor
    assert again.allocate(64).offset >= r.offset + 512


def test_image_without_header_is_rejected(core_cls):
    with pytest.raises(ArenaCorrupt):
        Arena.from_image(bytes(1 << 16), core_cls=core_cls)


def test_volatile_arena_loses_everything(core_cls):
    v = Arena(1 << 16, persistent=False, log_size=4096, core_cls=core_cls)
    r = v.allocate(64)
    v.store(r, 0, b"temp" * 2)
    v.flush(r, 0, 8)
    v.fence()
    assert v.crash().peek(r, 0, 8) == bytes(8)


def test_written_bytes_is_line_multiple(arena):
    r = heap(arena)
    arena.reset_stats()
    arena.store(r, 3, b"k" * 150)
    arena.flush(r, 0, 256)
    s = arena.stats()
    assert s.written_bytes == 64 * s.flushed_lines


def test_export_events(arena, tmp_path):
    r = heap(arena)
    arena.begin_trace()
    arena.store(r, 0, b"e" * 8)
    arena.flush(r, 0, 8)
    arena.fence()
    path = tmp_path / "events.csv"
    arena.export_events(path)
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    assert rows[0] == ["event_index", "kind", "offset", "length"]
    assert [row[1] for row in rows[1:]] == ["store", "flush", "fence"]
    assert int(rows[1][2]) == r.offset


def test_release_to_rolls_back_cursor(arena):
    mark = arena.cursor
    arena.allocate(4096)
    arena.release_to(mark)
    assert arena.cursor == mark
    with pytest.raises(ValueError):
        arena.release_to(mark + 1 << 30)


def test_pref_is_position_independent():
    r = PRef(128, 64)
    assert r.sub(8, 16) == PRef(136, 16)
