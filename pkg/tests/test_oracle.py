import pytest

from pmprims import nodes as nd
from pmprims import oracle as orc
from pmprims.oracle import Op, RefMap, ShadowDiff
from pmprims.pstore import Arena

from conftest import fill


def test_refmap_semantics():
    m = RefMap()
    m.apply(Op(orc.INSERT, 3, b"v"))
    assert m.get(3) == b"v" and 3 in m
    m.apply(Op(orc.UPDATE, 3, b"w"))
    assert m.items() == [(3, b"w")]
    with pytest.raises(KeyError):
        m.apply(Op(orc.ERASE, 4))
    assert m.keys() == [3]
    for kind in orc.STRUCTURAL + (orc.SEARCH,):
        orc.apply(m, Op(kind, 3))
    assert m.items() == [(3, b"w")]
    with pytest.raises(ValueError):
        m.apply(Op("rotate", 1))


def test_shadow_diff_counts_and_ranges():
    assert orc.diff_bytes(ShadowDiff(b"abcd", b"abcd")) == 0
    d = ShadowDiff(b"\0" * 16, b"\0\1\1\0" + b"\0" * 11 + b"\2")
    assert orc.diff_bytes(d) == 3
    assert d.ranges() == [(1, 3), (15, 16)]
    with pytest.raises(ValueError):
        ShadowDiff(b"a", b"ab")


def test_counter_bump_differs_in_at_most_eight_bytes():
    before = (255).to_bytes(8, "little")
    after = (256).to_bytes(8, "little")
    assert 1 <= orc.diff_bytes(ShadowDiff(before, after)) <= 8


def test_unsorted_insert_diff_is_confined(core_cls):
    arena = Arena(1 << 16, core_cls=core_cls)
    node = fill(nd.new_node(arena, nd.UNSORTED, 1024), range(0, 60, 3))
    d = node.desc
    before = node.image()
    node.insert(1, nd.pack_value(7, 7, 7.0))
    allowed = set(range(0, 8))
    allowed |= set(range(d.keys_off + 8 * 20, d.keys_off + 8 * 21))
    allowed |= set(range(d.values_off + 16 * 20, d.values_off + 16 * 21))
    diff = ShadowDiff(before, node.image())
    assert {i for a, b in diff.ranges() for i in range(a, b)} <= allowed


@pytest.mark.parametrize("n", [0, 1, 7])
def test_crash_points_cover_every_boundary(n):
    plans = orc.enumerate_crash_points([("fence", 0, 0, b"")] * n)
    assert [p.crash_point for p in plans] == list(range(n + 1))


def test_crash_points_are_sampled_beyond_limit():
    plans = orc.enumerate_crash_points([None] * 50, limit=10, seed=3)
    pts = [p.crash_point for p in plans]
    assert len(pts) == 10 and pts[0] == 0 and pts[-1] == 50
    assert pts == [p.crash_point for p in orc.enumerate_crash_points([None] * 50, 10, 3)]


def test_torn_words():
    old, new = bytes(16), b"\1" * 16
    assert orc.torn_words(old[:8] + new[8:], old, new) == []
    assert orc.torn_words(b"\1" * 4 + bytes(12), old, new) == [0]


def test_replay_roundtrip(tmp_path):
    ops = list(orc.generate_ops(200, seed=4, key_space=50))
    path = tmp_path / "ops.txt"
    orc.write_replay(path, ops)
    assert orc.read_replay(path) == ops
    assert {op.kind for op in ops} == {orc.INSERT, orc.SEARCH, orc.ERASE}


def test_replay_rejects_garbage(tmp_path):
    path = tmp_path / "bad.txt"
    path.write_text("insert 1\n")
    with pytest.raises(ValueError):
        orc.read_replay(path)


def test_generated_ops_are_seeded():
    a = list(orc.generate_ops(100, 1, 10))
    assert a == list(orc.generate_ops(100, 1, 10))
    assert a != list(orc.generate_ops(100, 2, 10))


@pytest.mark.parametrize("layout", nd.LAYOUTS)
def test_equivalence_driver_short_run(layout):
    report = orc.run_equivalence(layout, 256, seed=11, steps=3000, full_every=500)
    assert report.steps == 3000
    assert report.full_checks == 6
    assert report.counts[orc.SPLIT] > 0
    assert report.counts[orc.MERGE] + report.counts[orc.BALANCE] > 0


def test_dichotomy_check():
    old = [(1, [[(1, b"a")]]), (0, [])]
    new = [(2, [[(1, b"a")], [(2, b"b")]]), (0, [])]
    assert orc.dichotomy_violations(old, new, old) == []
    assert orc.dichotomy_violations(old, new, new) == []
    bad_head = [(3, [[(1, b"a")], [(2, b"b")], []]), (0, [])]
    assert orc.dichotomy_violations(old, new, bad_head)
    torn = [(2, [[(1, b"a")], [(2, b"X")]]), (0, [])]
    assert orc.dichotomy_violations(old, new, torn)
