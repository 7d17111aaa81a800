import random

import pytest

from pmprims import nodes as nd
from pmprims.pstore import Arena, PRef
from pmprims.tree import (
    PERSISTENT, PLAIN, VIA_BITMAP, VIA_SLOTS, VOLATILE, BPlusTree, TreeCorrupt)

from conftest import value


def items(keys):
    return [(k, value(k)) for k in keys]


def tree_of_depth(arena, depth, placement, node_size=256):
    leaf_cap = nd.capacity(nd.SORTED, node_size)
    inner_cap = nd.capacity(nd.SORTED, node_size)
    n = leaf_cap * inner_cap ** (depth - 1)
    t = BPlusTree.build(arena, items(range(n)), node_size=node_size, placement=placement)
    assert t.depth == depth
    return t


@pytest.mark.parametrize("placement", [VOLATILE, PERSISTENT])
@pytest.mark.parametrize("depth", [1, 2, 3, 4])
def test_traverse_counts_derefs_per_placement(core_cls, placement, depth):
    arena = Arena(8 << 20, core_cls=core_cls)
    t = tree_of_depth(arena, depth, placement)
    rng = random.Random(depth)
    for _ in range(20):
        leaf, trace = t.traverse(rng=rng)
        assert trace.derefs == depth
        if placement == VOLATILE:
            assert (trace.derefs_volatile, trace.derefs_persistent) == (depth - 1, 1)
        else:
            assert (trace.derefs_volatile, trace.derefs_persistent) == (0, depth)
    with pytest.raises(ValueError):
        t.traverse()


def test_traverse_by_key_reaches_holding_leaf(arena):
    t = tree_of_depth(arena, 3, VOLATILE)
    for k in (0, 17, 300, 511):
        leaf, _ = t.traverse(k)
        assert leaf.get(k) == value(k)


def test_capacity_plus_one_inserts_split_once(arena):
    t = BPlusTree(arena, node_size=512)
    cap = t.leaf_desc.capacity
    for k in range(cap + 1):
        t.insert(k, value(k))
    assert t.depth == 2
    assert t.events["split"] == 1
    t.check()


def test_rich_sibling_is_balanced_not_merged(arena):
    probe = BPlusTree(Arena(1 << 16), node_size=512)
    cap = probe.leaf_desc.capacity
    t = BPlusTree.build(arena, items(range(2 * cap)), node_size=512)
    left = next(t.leaves())
    while left.peek_size() > left.desc.min_fill:
        t.erase(left.keys()[0])
    assert t.events == {"split": 0, "balance": 0, "merge": 0}
    t.erase(left.keys()[0])
    assert t.events == {"split": 0, "balance": 1, "merge": 0}
    assert left.peek_size() >= left.desc.min_fill
    t.check()


def test_poor_sibling_is_merged(arena):
    probe = BPlusTree(Arena(1 << 16), node_size=512)
    fill = probe.leaf_desc.min_fill
    t = BPlusTree.build(arena, items(range(2 * fill)), node_size=512, fill=0.5)
    assert t.depth == 2
    t.erase(0)
    assert t.events["merge"] == 1
    assert t.depth == 1
    assert t.items() == items(range(1, 2 * fill))
    t.check()


@pytest.mark.parametrize("leaf", nd.LAYOUTS)
@pytest.mark.parametrize("inner", nd.INNER_LAYOUTS)
@pytest.mark.parametrize("placement", [VOLATILE, PERSISTENT])
def test_random_workload_matches_dict(core_cls, leaf, inner, placement):
    arena = Arena(4 << 20, core_cls=core_cls)
    t = BPlusTree(arena, leaf_layout=leaf, inner_layout=inner, node_size=256,
                  placement=placement)
    ref = {}
    rng = random.Random(hash((leaf, inner, placement)) & 0xFFFF)
    for step in range(1500):
        k = rng.randrange(400)
        if rng.random() < 0.6:
            t.insert(k, value(step))
            ref[k] = value(step)
        elif k in ref:
            t.erase(k)
            del ref[k]
    t.check()
    assert t.items() == sorted(ref.items())
    assert len(t) == len(ref)
    for k in range(400):
        assert t.get(k) == ref.get(k)


def test_erase_absent_raises(arena):
    t = BPlusTree(arena)
    with pytest.raises(nd.KeyAbsent):
        t.erase(3)


@pytest.mark.parametrize("mode,leaf", [(PLAIN, nd.SORTED), (PLAIN, nd.UNSORTED),
                                       (VIA_BITMAP, nd.BITMAP), (VIA_BITMAP, nd.HASHING),
                                       (VIA_SLOTS, nd.INDIRECTION)])
def test_iterate_visits_every_entry(arena, mode, leaf):
    n = 500
    t = BPlusTree.build(arena, items(range(0, 2 * n, 2)), leaf_layout=leaf,
                        node_size=512, fill=0.8)
    seen = []
    assert t.iterate(mode, seen.append) == n
    assert sorted(seen) == list(range(0, 2 * n, 2))
    if mode == VIA_SLOTS or leaf == nd.SORTED:
        assert seen == sorted(seen)


def test_iterate_rejects_mismatched_mode(arena):
    t = BPlusTree(arena, leaf_layout=nd.SORTED)
    with pytest.raises(nd.LayoutMismatch):
        t.iterate(VIA_SLOTS)
    with pytest.raises(ValueError):
        t.iterate("sideways")


@pytest.mark.parametrize("placement", [VOLATILE, PERSISTENT])
def test_crash_and_recover_keeps_contents(core_cls, placement):
    arena = Arena(4 << 20, core_cls=core_cls)
    t = BPlusTree(arena, leaf_layout=nd.HASHING, node_size=256, placement=placement)
    rng = random.Random(5)
    for k in rng.sample(range(10_000), 600):
        t.insert(k, value(k))
    before = t.items()
    again = BPlusTree.recover(arena.crash())
    assert again.items() == before
    again.check()
    for k, v in before[::7]:
        assert again.get(k) == v


def test_recover_single_leaf(arena):
    t = BPlusTree(arena, node_size=512)
    t.insert(1, value(1))
    again = BPlusTree.recover(arena.crash())
    assert again.depth == 1
    assert again.root == (1, again.leftmost)
    assert again.get(1) == value(1)


def test_recover_empty_arena_fails(arena):
    with pytest.raises(TreeCorrupt):
        BPlusTree.recover(arena)


def _chain(arena, n=4):
    return BPlusTree.build(arena, items(range(n * 10)), node_size=256, fill=1.0)


def test_out_of_order_chain_is_rejected(arena):
    t = _chain(arena)
    leaves = list(t.leaves())
    leaves[2].build(items(range(1000, 1005)), instrumented=False,
                    next_off=leaves[2].peek_next(), prev_off=leaves[2].peek_prev())
    leaves[1].build(items(range(2000, 2005)), instrumented=False,
                    next_off=leaves[1].peek_next(), prev_off=leaves[1].peek_prev())
    with pytest.raises(TreeCorrupt):
        BPlusTree.recover(arena)


def test_cyclic_chain_is_rejected(arena):
    t = _chain(arena)
    leaves = list(t.leaves())
    leaves[-1].set_links(next_off=leaves[0].ref.offset)
    with pytest.raises(TreeCorrupt):
        BPlusTree.recover(arena)


def test_broken_back_link_is_rejected(arena):
    t = _chain(arena)
    leaves = list(t.leaves())
    leaves[2].set_links(prev_off=leaves[0].ref.offset)
    with pytest.raises(TreeCorrupt):
        BPlusTree.recover(arena)


def test_build_requires_sorted_unique_keys(arena):
    with pytest.raises(ValueError):
        BPlusTree.build(arena, [(2, value(2)), (1, value(1))])


def test_inner_layout_must_route(arena):
    with pytest.raises(nd.LayoutMismatch):
        BPlusTree(arena, inner_layout=nd.HASHING)


def test_dump_format(arena):
    t = BPlusTree.build(arena, items(range(12)), node_size=256)
    lines = t.dump().splitlines()
    assert lines[0].startswith("0 v:") and lines[0].endswith("MAX]")
    assert lines[1].split()[2:] == ["sorted", "[0", "1", "2", "3", "4", "5]"]
    assert len(lines) == 1 + 2
