"""B+-tree assembled from the node primitives.

Leaves always live in the persistent arena and form a doubly linked chain.
Inner nodes live either in a volatile arena (selective persistence, rebuilt
on recovery) or next to the leaves.  An inner entry ``(bound, child)`` routes
every key below ``bound`` that is not routed by an earlier entry; the last
entry of the root carries ``MAX_KEY``, so ``lower_bound_child`` always finds
a child.  For a leaf the bound is one past its largest key when it was last
split or rebalanced.
"""

from __future__ import annotations

import random
import struct
from dataclasses import dataclass, field

from . import nodes as nd
from .nodes import (INDIVIDUAL, MAX_KEY, MOVE, TO_HIGHER, TO_LOWER, KeyAbsent,
                    Node, SearchResult)
from .pstore import Arena, PRef, WriteStats

VOLATILE = "volatile"
PERSISTENT = "persistent"
PLACEMENTS = (VOLATILE, PERSISTENT)

PLAIN = "plain"
VIA_BITMAP = "via_bitmap"
VIA_SLOTS = "via_slots"
ITERATE_MODES = {
    PLAIN: (nd.SORTED, nd.UNSORTED),
    VIA_BITMAP: nd.BITMAP_LAYOUTS,
    VIA_SLOTS: (nd.INDIRECTION,),
}

TAG_PERSISTENT = 1
TAG_VOLATILE = 2

TREE_MAGIC = 0x45455254504D5000  # "\0PMPTREE"
_RECORD = struct.Struct("<10Q")
_PTR = struct.Struct("<QQ")
_KINDS = nd.LAYOUTS


class TreeError(Exception):
    pass


class TreeCorrupt(TreeError):
    pass


@dataclass
class TraversalTrace:
    derefs_volatile: int = 0
    derefs_persistent: int = 0
    visited: list = field(default_factory=list)

    @property
    def derefs(self) -> int:
        return self.derefs_volatile + self.derefs_persistent


def _ptr(tag: int, off: int) -> bytes:
    return _PTR.pack(tag, off)


class BPlusTree:
    """A B+-tree over one persistent arena (leaves) and an inner-node arena."""

    def __init__(self, arena: Arena, *, leaf_layout: str = nd.SORTED,
                 inner_layout: str = nd.SORTED, node_size: int = 1024,
                 placement: str = VOLATILE, leaf_capacity: int | None = None,
                 inner_capacity: int | None = None, inner_arena: Arena | None = None,
                 fa: str = INDIVIDUAL, split_strategy: str = MOVE,
                 _create: bool = True):
        if placement not in PLACEMENTS:
            raise ValueError(f"unknown placement {placement!r}")
        if inner_layout not in nd.INNER_LAYOUTS:
            raise nd.LayoutMismatch(f"{inner_layout} nodes cannot be inner nodes")
        self.arena = arena
        self.placement = placement
        self.fa = fa
        self.split_strategy = split_strategy
        self.leaf_desc = nd.describe(leaf_layout, node_size, leaf_capacity)
        self.inner_desc = nd.describe(inner_layout, node_size, inner_capacity)
        if placement == VOLATILE:
            if inner_arena is None:
                inner_arena = Arena(max(1 << 20, arena.size // 4), persistent=False,
                                    log_size=4096, core_cls=arena._core_cls)
            self.inner_arena = inner_arena
            self.inner_tag = TAG_VOLATILE
        else:
            self.inner_arena = arena
            self.inner_tag = TAG_PERSISTENT
        self._nodes: dict = {}
        self._free: dict = {True: [], False: []}
        self.events = {"split": 0, "balance": 0, "merge": 0}
        self.depth = 1
        self.root = (TAG_PERSISTENT, 0)
        self.leftmost = 0
        if _create:
            leaf = self._new_node(True)
            leaf.build((), instrumented=False)
            self.root = (TAG_PERSISTENT, leaf.ref.offset)
            self.leftmost = leaf.ref.offset
            self._write_record()

    # -- node handles ---------------------------------------------------------

    @property
    def node_size(self) -> int:
        return self.leaf_desc.node_size

    def _arena_of(self, tag: int) -> Arena:
        return self.arena if tag == TAG_PERSISTENT else self.inner_arena

    def _node(self, tag: int, off: int, leaf: bool) -> Node:
        key = (tag, off, leaf)
        node = self._nodes.get(key)
        if node is None:
            desc = self.leaf_desc if leaf else self.inner_desc
            node = nd.open_node(self._arena_of(tag), PRef(off, desc.node_size), desc)
            self._nodes[key] = node
        return node

    def _new_node(self, leaf: bool) -> Node:
        tag = TAG_PERSISTENT if leaf else self.inner_tag
        desc = self.leaf_desc if leaf else self.inner_desc
        return self._node(tag, self._allocate(desc, leaf).offset, leaf)

    def _allocate(self, desc, leaf: bool) -> PRef:
        free = self._free[leaf]
        if free:
            return PRef(free.pop(), desc.node_size)
        tag = TAG_PERSISTENT if leaf else self.inner_tag
        return nd.allocate_node(self._arena_of(tag), desc)

    def _release(self, node: Node, leaf: bool) -> None:
        self._free[leaf].append(node.ref.offset)

    def _tag(self, node: Node) -> int:
        return TAG_PERSISTENT if node.arena is self.arena else TAG_VOLATILE

    def _handle(self, node: Node) -> tuple[int, int]:
        return (self._tag(node), node.ref.offset)

    def _root_node(self) -> Node:
        return self._node(*self.root, self.depth == 1)

    def _child(self, inner: Node, rank: int, leaf: bool) -> Node:
        tag, off = _PTR.unpack(inner.load_value(inner.physical(rank)))
        return self._node(tag, off, leaf)

    def _peek_child(self, inner: Node, rank: int, leaf: bool) -> Node:
        pos = inner.positions()[rank] if inner.kind == nd.INDIRECTION else rank
        tag, off = _PTR.unpack(inner.peek_value(pos))
        return self._node(tag, off, leaf)

    def _phys(self, inner: Node, rank: int) -> int:
        return inner.positions()[rank] if inner.kind == nd.INDIRECTION else rank

    # -- durable root record --------------------------------------------------

    def _write_record(self) -> None:
        root_off = self.root[1] if self.root[0] == TAG_PERSISTENT else 0
        rec = _RECORD.pack(
            TREE_MAGIC, self.leftmost, _KINDS.index(self.leaf_desc.kind),
            _KINDS.index(self.inner_desc.kind), self.node_size,
            self.leaf_desc.capacity, self.inner_desc.capacity,
            PLACEMENTS.index(self.placement), root_off, self.depth)
        root = self.arena.root
        self.arena.store(root, 0, rec)
        self.arena.persist(root, 0, len(rec))

    # -- traversal ------------------------------------------------------------

    def _descend(self, key: int):
        path = []
        node = self._root_node()
        for level in range(self.depth - 1):
            rank = nd.lower_bound_child(node, key)
            path.append((node, rank))
            node = self._child(node, rank, level == self.depth - 2)
        return path, node

    def traverse(self, key: int | None = None, rng: random.Random | None = None):
        """Descend to a leaf; returns ``(leaf, TraversalTrace)``.

        With ``key=None`` a random child is taken on every level (drawn from
        ``rng``); otherwise the key is routed through the inner nodes.
        """
        if key is None and rng is None:
            raise ValueError("traverse needs a key or a random generator")
        trace = TraversalTrace()
        node = self._root_node()
        for level in range(self.depth):
            self._count_deref(trace, node)
            if level == self.depth - 1:
                break
            if key is None:
                rank = rng.randrange(node.size())
            else:
                rank = nd.lower_bound_child(node, key)
            node = self._child(node, rank, level == self.depth - 2)
        return node, trace

    def _count_deref(self, trace: TraversalTrace, node: Node) -> None:
        if node.arena.persistent:
            trace.derefs_persistent += 1
        else:
            trace.derefs_volatile += 1
        trace.visited.append(self._handle(node))

    def get(self, key: int) -> bytes | None:
        _, leaf = self._descend(key)
        return leaf.get(key)

    def __contains__(self, key: int) -> bool:
        return self.get(key) is not None

    # -- insert ---------------------------------------------------------------

    def insert(self, key: int, value: bytes) -> WriteStats:
        before = self.arena.counters()
        path, leaf = self._descend(key)
        r = leaf.search(key)
        if r.found or leaf.peek_size() < leaf.capacity:
            leaf.insert(key, value, fa=self.fa, pos=r, measure=False)
        else:
            left, right, sep = nd.split(leaf, self.split_strategy, self.fa,
                                        allocator=lambda d: self._allocate(d, True))
            self._nodes[(TAG_PERSISTENT, right.ref.offset, True)] = right
            self.events["split"] += 1
            target = left if key <= sep else right
            target.insert(key, value, fa=self.fa, pos=target.search(key), measure=False)
            self._link_split(path, len(path) - 1, sep + 1, left, right)
        return WriteStats.from_counters(
            [a - b for a, b in zip(self.arena.counters(), before)], self.arena.line_size)

    def _link_split(self, path, i, bound, left: Node, right: Node) -> None:
        """Publish a split: ``left`` now ends below ``bound``, ``right`` follows."""
        lptr, rptr = _ptr(*self._handle(left)), _ptr(*self._handle(right))
        if i < 0:
            root = self._new_node(False)
            root.build([(bound, lptr), (MAX_KEY, rptr)], instrumented=True)
            self.root = self._handle(root)
            self.depth += 1
            self._write_record()
            return
        parent, rank = path[i]
        parent.update_value(parent.physical(rank), rptr)
        if parent.peek_size() < parent.capacity:
            parent.insert(bound, lptr, pos=parent.search(bound), measure=False)
            return
        pl, pr, psep = nd.split(parent, MOVE, INDIVIDUAL,
                                allocator=lambda d: self._allocate(d, False))
        self._nodes[(self.inner_tag, pr.ref.offset, False)] = pr
        self.events["split"] += 1
        target = pl if bound <= psep else pr
        target.insert(bound, lptr, pos=target.search(bound), measure=False)
        self._link_split(path, i - 1, psep, pl, pr)

    # -- erase ----------------------------------------------------------------

    def erase(self, key: int) -> WriteStats:
        before = self.arena.counters()
        path, leaf = self._descend(key)
        r = leaf.search(key)
        if not r.found:
            raise KeyAbsent(key)
        leaf.erase(key, fa=self.fa, pos=r, measure=False)
        self._fix_underflow(path, len(path) - 1, leaf, True)
        return WriteStats.from_counters(
            [a - b for a, b in zip(self.arena.counters(), before)], self.arena.line_size)

    def _bound_of(self, node: Node, leaf: bool) -> int:
        return node.max_key() + 1 if leaf else node.max_key()

    def _set_bound(self, parent: Node, rank: int, bound: int) -> None:
        parent.replace_key(self._phys(parent, rank), bound)

    def _fix_underflow(self, path, i, node: Node, leaf: bool) -> None:
        if i < 0:
            if not leaf and node.peek_size() == 1:
                child = self._peek_child(node, 0, self.depth == 2)
                self._release(node, False)
                self.root = self._handle(child)
                self.depth -= 1
                self._write_record()
            return
        size = node.peek_size()
        fill = node.desc.min_fill
        if size >= fill:
            return
        parent, rank = path[i]
        n = parent.peek_size()
        right = self._peek_child(parent, rank + 1, leaf) if rank + 1 < n else None
        left = self._peek_child(parent, rank - 1, leaf) if rank > 0 else None
        if right is not None and right.peek_size() > fill:
            nd.balance(right, node, TO_LOWER, (right.peek_size() - size) // 2)
            self.events["balance"] += 1
            self._set_bound(parent, rank, self._bound_of(node, leaf))
            return
        if left is not None and left.peek_size() > fill:
            nd.balance(left, node, TO_HIGHER, (left.peek_size() - size) // 2)
            self.events["balance"] += 1
            self._set_bound(parent, rank - 1, self._bound_of(left, leaf))
            return
        if right is not None:
            lower, upper, urank = node, right, rank + 1
        else:
            lower, upper, urank = left, node, rank
        nd.merge_nodes(lower, upper)
        nd.unlink(upper)
        self.events["merge"] += 1
        # the upper node's entry keeps its bound and now routes to the lower node
        parent.update_value(self._phys(parent, urank), _ptr(*self._handle(lower)))
        lrank = urank - 1
        parent.erase(None, pos=SearchResult(True, self._phys(parent, lrank), lrank),
                     measure=False)
        self._release(upper, leaf)
        self._fix_underflow(path, i - 1, parent, False)

    # -- iteration ------------------------------------------------------------

    def leaves(self):
        """Leaf nodes in chain order (uninstrumented)."""
        off = self.leftmost
        while off:
            leaf = self._node(TAG_PERSISTENT, off, True)
            yield leaf
            off = leaf.peek_next()

    def iterate(self, mode: str, visitor=None) -> int:
        """Walk the leaf chain reading keys in the given mode (instrumented)."""
        if mode not in ITERATE_MODES:
            raise ValueError(f"unknown iteration mode {mode!r}")
        if self.leaf_desc.kind not in ITERATE_MODES[mode]:
            raise nd.LayoutMismatch(
                f"{mode} iteration does not apply to {self.leaf_desc.kind} leaves")
        count = 0
        off = self.leftmost
        while off:
            leaf = self._node(TAG_PERSISTENT, off, True)
            for key in _ITERATORS[mode](leaf):
                if visitor is not None:
                    visitor(key)
                count += 1
            off = leaf.next_offset()
        return count

    def items(self) -> list[tuple[int, bytes]]:
        out = []
        for leaf in self.leaves():
            out.extend(leaf.items())
        return out

    def __len__(self) -> int:
        return sum(leaf.peek_size() for leaf in self.leaves())

    # -- bulk construction ----------------------------------------------------

    @classmethod
    def build(cls, arena: Arena, items, *, fill: float = 1.0, **kw) -> "BPlusTree":
        """Bulk-load sorted ``(key, value)`` pairs; every node holds at least
        half its capacity (except a lone root)."""
        tree = cls(arena, _create=False, **kw)
        items = list(items)
        if any(items[i][0] >= items[i + 1][0] for i in range(len(items) - 1)):
            raise ValueError("bulk load needs strictly increasing keys")
        tree._assemble(items, fill)
        return tree

    def _assemble(self, items, fill: float) -> None:
        per = max(1, min(self.leaf_desc.capacity, int(self.leaf_desc.capacity * fill)))
        groups = _even_groups(items, per)
        refs = [self.arena.allocate(self.leaf_desc.node_size) for _ in groups]
        entries = []
        for i, (ref, group) in enumerate(zip(refs, groups)):
            leaf = self._node(TAG_PERSISTENT, ref.offset, True)
            leaf.build(group, instrumented=False,
                       next_off=refs[i + 1].offset if i + 1 < len(refs) else 0,
                       prev_off=refs[i - 1].offset if i else 0)
            bound = group[-1][0] + 1 if group and i + 1 < len(refs) else MAX_KEY
            entries.append((bound, (TAG_PERSISTENT, ref.offset)))
        self.leftmost = refs[0].offset
        self.depth = 1
        while len(entries) > 1:
            groups = _even_groups(entries, self.inner_desc.capacity)
            up = []
            for group in groups:
                ref = self.inner_arena.allocate(self.inner_desc.node_size)
                inner = self._node(self.inner_tag, ref.offset, False)
                inner.build([(b, _ptr(*h)) for b, h in group], instrumented=False)
                up.append((group[-1][0], (self.inner_tag, ref.offset)))
            entries = up
            self.depth += 1
        self.root = entries[0][1]
        self._write_record()

    # -- recovery -------------------------------------------------------------

    @classmethod
    def recover(cls, arena: Arena, inner_arena: Arena | None = None,
                **kw) -> "BPlusTree":
        """Reopen a tree from its durable root record.

        Volatile inner levels are rebuilt from the leaf chain; a persistent
        root is reopened as stored.
        """
        raw = arena.peek(arena.root, 0, _RECORD.size)
        (magic, leftmost, leaf_kind, inner_kind, node_size, leaf_cap, inner_cap,
         placement, root_off, depth) = _RECORD.unpack(raw)
        if magic != TREE_MAGIC:
            raise TreeCorrupt("no tree root record in arena")
        if leaf_kind >= len(_KINDS) or inner_kind >= len(_KINDS) or placement > 1:
            raise TreeCorrupt("root record names an unknown layout")
        tree = cls(arena, leaf_layout=_KINDS[leaf_kind], inner_layout=_KINDS[inner_kind],
                   node_size=node_size, placement=PLACEMENTS[placement],
                   leaf_capacity=leaf_cap, inner_capacity=inner_cap,
                   inner_arena=inner_arena, _create=False, **kw)
        if tree.placement == PERSISTENT and root_off:
            tree.leftmost, tree.root, tree.depth = leftmost, (TAG_PERSISTENT, root_off), depth
            tree.check()
            return tree
        leaves = tree._scan_chain(leftmost)
        tree._rebuild(leaves)
        return tree

    def _scan_chain(self, leftmost: int) -> list:
        if not leftmost:
            raise TreeCorrupt("root record holds no leftmost leaf")
        seen = set()
        leaves = []
        prev_max = -1
        prev_off = 0
        off = leftmost
        size = self.leaf_desc.node_size
        while off:
            if off in seen:
                raise TreeCorrupt(f"leaf chain cycles at offset {off}")
            if off % 64 or off + size > self.arena.size:
                raise TreeCorrupt(f"leaf link {off} outside the arena")
            seen.add(off)
            leaf = self._node(TAG_PERSISTENT, off, True)
            keys = leaf.keys()
            if leaf.peek_prev() != prev_off:
                raise TreeCorrupt(f"leaf {off} has a broken back link")
            if keys:
                if keys[0] <= prev_max:
                    raise TreeCorrupt(f"leaf {off} overlaps the key range of its predecessor")
                prev_max = keys[-1]
            leaves.append((leaf, keys))
            prev_off = off
            off = leaf.peek_next()
        return leaves

    def _rebuild(self, leaves) -> None:
        entries = []
        for i, (leaf, keys) in enumerate(leaves):
            bound = keys[-1] + 1 if keys and i + 1 < len(leaves) else MAX_KEY
            entries.append((bound, (TAG_PERSISTENT, leaf.ref.offset)))
        self.leftmost = leaves[0][0].ref.offset
        self.depth = 1
        while len(entries) > 1:
            up = []
            for group in _even_groups(entries, self.inner_desc.capacity):
                inner = self._new_node(False)
                inner.build([(b, _ptr(*h)) for b, h in group], instrumented=False)
                up.append((group[-1][0], (self.inner_tag, inner.ref.offset)))
            entries = up
            self.depth += 1
        self.root = entries[0][1]

    # -- validation and dumps -------------------------------------------------

    def check(self) -> None:
        """Verify routing, depth, occupancy and chain invariants."""
        order = []

        def walk(node, level, lo, hi, is_root):
            leaf = level == self.depth - 1
            keys = node.keys()
            if not is_root and len(keys) < node.desc.min_fill:
                raise TreeCorrupt(f"node {self._handle(node)} under-full ({len(keys)})")
            if leaf:
                if keys and (keys[0] < lo or keys[-1] >= hi):
                    raise TreeCorrupt(f"leaf {node.ref.offset} holds keys outside [{lo}, {hi})")
                order.append(node.ref.offset)
                return
            if not keys or keys[-1] != hi:
                raise TreeCorrupt(f"inner node {self._handle(node)} does not end at its bound")
            prev = lo
            for rank, bound in enumerate(keys):
                if bound <= prev and rank:
                    raise TreeCorrupt("inner bounds not increasing")
                walk(self._peek_child(node, rank, level + 1 == self.depth - 1),
                     level + 1, prev, bound, False)
                prev = bound

        walk(self._root_node(), 0, 0, MAX_KEY, True)
        chain = [leaf.ref.offset for leaf in self.leaves()]
        if chain != order:
            raise TreeCorrupt("leaf chain disagrees with the tree order")
        self._scan_chain(self.leftmost)

    def dump(self) -> str:
        """Depth-first listing: level, node handle, layout, separators (keys on leaves)."""
        lines = []

        def walk(node, level):
            leaf = level == self.depth - 1
            tag, off = self._handle(node)
            keys = node.keys()
            shown = keys if leaf else ["MAX" if k == MAX_KEY else k for k in keys]
            lines.append(f"{level} {'p' if tag == TAG_PERSISTENT else 'v'}:{off} "
                         f"{node.kind} [{' '.join(map(str, shown))}]")
            if not leaf:
                for rank in range(len(keys)):
                    walk(self._peek_child(node, rank, level + 1 == self.depth - 1),
                         level + 1)

        walk(self._root_node(), 0)
        return "\n".join(lines) + "\n"


def _even_groups(seq, per: int) -> list:
    """Split ``seq`` into ceil(len/per) groups whose sizes differ by at most one."""
    n = len(seq)
    if n == 0:
        return [[]]
    k = -(-n // per)
    base, extra = divmod(n, k)
    out, i = [], 0
    for g in range(k):
        size = base + (g < extra)
        out.append(seq[i:i + size])
        i += size
    return out


def _iter_plain(leaf: Node):
    n = leaf.size()
    keys = nd._u64s(leaf._ld(leaf.desc.keys_off, nd.KEY_SIZE * n)) if n else []
    return keys


def _iter_bitmap(leaf: Node):
    return [leaf.load_key(p) for p in nd._set_bits(leaf._bits())]


def _iter_slots(leaf: Node):
    n = leaf.size()
    return [leaf.load_key(p) for p in leaf._slots(n)]


_ITERATORS = {PLAIN: _iter_plain, VIA_BITMAP: _iter_bitmap, VIA_SLOTS: _iter_slots}
