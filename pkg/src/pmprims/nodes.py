"""PMem-aware data node layouts and node-local micro-operations.

Five layouts share one physical scheme: a header in the leading cache
line(s), then a 64-byte aligned key array, then the value array directly
behind it.  Keys are 8-byte unsigned integers and values are opaque 16-byte
records (see :func:`pack_value`).

=============  =============================================================
layout         header
=============  =============================================================
sorted         count(8) next(16) prev(16), keys kept in order
unsorted       count(8) next(16) prev(16), entries dense in [0, count)
bitmap         validity bitmap words, next, prev
indirection    bitmap, 1-byte slot array (rank -> position), next, prev
hashing        bitmap, 1-byte fingerprint array, next, prev
=============  =============================================================

Mutating operations persist data lines first, fence, and only then publish
the change through the count word or bitmap (the validity line).  Search and
position lookups done on behalf of a mutation are not instrumented; the
caller is expected to have paid for them with :meth:`Node.search`.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from typing import NamedTuple

from ._core import NodeKernel
from .pstore import PRef, WriteStats

SORTED = "sorted"
UNSORTED = "unsorted"
BITMAP = "bitmap"
INDIRECTION = "indirection"
HASHING = "hashing"
LAYOUTS = (SORTED, UNSORTED, BITMAP, INDIRECTION, HASHING)
BITMAP_LAYOUTS = (BITMAP, INDIRECTION, HASHING)
INNER_LAYOUTS = (SORTED, INDIRECTION)

NODE_SIZES = (256, 512, 1024, 2048, 4096)
SEARCH_STRUCTURE_CAPACITY = {256: 8, 512: 18, 1024: 37, 2048: 79, 4096: 160}

INDIVIDUAL = "individual"
TX = "tx"

MOVE = "move"
COPY = "copy"
TO_LOWER = "toLower"
TO_HIGHER = "toHigher"

KEY_SIZE = 8
VALUE_SIZE = 16
ENTRY_SIZE = KEY_SIZE + VALUE_SIZE
LINK_SIZE = 16
LINE = 64
MAX_KEY = (1 << 64) - 1

FP_MULT = 0x9E3779B97F4A7C15
_M64 = (1 << 64) - 1

_U64 = struct.Struct("<Q")
_LINK = struct.Struct("<QQ")
_VALUE = struct.Struct("<iid")
NULL_LINK = _LINK.pack(0, 0)

_KIND_CODE = {SORTED: 0, UNSORTED: 1, BITMAP: 2, INDIRECTION: 3, HASHING: 4}
_ALGO_CODE = {"binary": 0, "linear": 1, "bitmap_linear": 2, "indirect_binary": 3,
              "hash_probe": 4}
_KERNELS: dict = {}

SEARCH_ALGORITHMS = {
    SORTED: ("binary", "linear"),
    UNSORTED: ("linear",),
    BITMAP: ("bitmap_linear",),
    INDIRECTION: ("indirect_binary", "bitmap_linear"),
    HASHING: ("hash_probe", "bitmap_linear"),
}


class NodeError(Exception):
    pass


class UnsupportedSize(NodeError, ValueError):
    pass


class NodeFull(NodeError):
    pass


class KeyAbsent(NodeError, KeyError):
    pass


class LayoutMismatch(NodeError, ValueError):
    pass


class PreconditionError(NodeError, ValueError):
    pass


def fingerprint(key: int) -> int:
    return ((key * FP_MULT) & _M64) >> 56


def pack_value(a: int, b: int, c: float) -> bytes:
    return _VALUE.pack(a, b, c)


def unpack_value(raw: bytes) -> tuple[int, int, float]:
    return _VALUE.unpack(raw)


def _u64s(raw: bytes) -> list[int]:
    return list(struct.unpack(f"<{len(raw) // 8}Q", raw))


def _pack_u64s(keys) -> bytes:
    return struct.pack(f"<{len(keys)}Q", *keys)


def _lines(start: int, end: int):
    """Split [start, end) at cache-line boundaries."""
    while start < end:
        stop = min(end, (start // LINE + 1) * LINE)
        yield start, stop
        start = stop


# -- capacity and layout descriptors ----------------------------------------

def capacity(kind: str, node_size: int) -> int:
    """Entries per node.

    ``kind`` is a layout name or one of ``"base"`` (unaligned reference
    packing), ``"aligned"`` or ``"search"``.
    """
    if node_size not in NODE_SIZES:
        raise UnsupportedSize(f"node size {node_size} not in {NODE_SIZES}")
    if kind == "base":
        return (node_size - 40) // ENTRY_SIZE
    if kind in ("aligned", SORTED, UNSORTED):
        return (node_size - LINE) // ENTRY_SIZE
    if kind in ("search",) + BITMAP_LAYOUTS:
        return SEARCH_STRUCTURE_CAPACITY[node_size]
    raise LayoutMismatch(f"unknown layout {kind!r}")


@dataclass(frozen=True)
class LayoutDescriptor:
    kind: str
    node_size: int
    capacity: int
    header_bytes: int
    keys_off: int
    values_off: int
    bitmap_words: int
    aux_off: int
    next_off: int
    prev_off: int

    @property
    def has_bitmap(self) -> bool:
        return self.kind in BITMAP_LAYOUTS

    @property
    def min_fill(self) -> int:
        return self.capacity // 2


def describe(kind: str, node_size: int, cap: int | None = None) -> LayoutDescriptor:
    """Compute the byte layout of a node.

    ``cap`` overrides the capacity (inner nodes, equal-count experiments);
    the result must still fit into ``node_size``.
    """
    if kind not in LAYOUTS:
        raise LayoutMismatch(f"unknown layout {kind!r}")
    if cap is None:
        cap = capacity(kind, node_size)
    if cap < 2:
        raise PreconditionError("a node needs room for at least two entries")
    if kind in (SORTED, UNSORTED):
        words, aux, next_off, prev_off, used = 0, 0, 8, 24, 40
    else:
        if cap > 256:
            raise PreconditionError("1-byte slots address at most 256 entries")
        words = -(-cap // 64)
        aux = 8 * words
        pos = aux + (cap if kind != BITMAP else 0)
        pos = -(-pos // 8) * 8
        next_off, prev_off, used = pos, pos + LINK_SIZE, pos + 2 * LINK_SIZE
    header = -(-used // LINE) * LINE
    keys_off = header
    values_off = keys_off + KEY_SIZE * cap
    if values_off + VALUE_SIZE * cap > node_size:
        raise PreconditionError(
            f"{kind} node of {node_size} B cannot hold {cap} entries")
    return LayoutDescriptor(kind, node_size, cap, header, keys_off, values_off,
                            words, aux, next_off, prev_off)


class SearchResult(NamedTuple):
    found: bool
    physical_pos: int
    logical_rank: int  # insertion rank when not found; -1 for unordered layouts


# -- node classes -------------------------------------------------------------

class Node:
    """A node image in an arena, interpreted under one layout."""

    kind = ""
    default_search = ""

    __slots__ = ("arena", "ref", "desc", "_kern", "_core")

    def __init__(self, arena, ref: PRef, desc: LayoutDescriptor):
        if desc.kind != self.kind:
            raise LayoutMismatch(f"{type(self).__name__} given {desc.kind} layout")
        if ref.length < desc.node_size or ref.offset + desc.node_size > arena.size:
            raise PreconditionError("node does not fit its reference")
        self.arena = arena
        self.ref = ref
        self.desc = desc
        self._core = arena.kernel_core
        self._kern = _kernel(desc) if self._core is not None else None

    def __repr__(self):
        return f"<{type(self).__name__} @{self.ref.offset} size={self.peek_size()}>"

    def __eq__(self, other):
        return (isinstance(other, Node) and other.arena is self.arena
                and other.ref.offset == self.ref.offset)

    def __hash__(self):
        return hash((id(self.arena), self.ref.offset))

    # raw helpers
    def _ld(self, off, n):
        return self.arena.load(self.ref, off, n)

    def _pk(self, off, n):
        return self.arena.peek(self.ref, off, n)

    def _st(self, off, data):
        if self.arena.in_tx:
            self.arena.tx_snapshot(self.ref, off, len(data))
        self.arena.store(self.ref, off, data)

    def _fl(self, off, n):
        self.arena.flush(self.ref, off, n)

    def _fence(self):
        self.arena.fence()

    @property
    def capacity(self) -> int:
        return self.desc.capacity

    @property
    def node_size(self) -> int:
        return self.desc.node_size

    # links
    def next_offset(self) -> int:
        tag, off = _LINK.unpack(self._ld(self.desc.next_off, LINK_SIZE))
        return off if tag else 0

    def prev_offset(self) -> int:
        tag, off = _LINK.unpack(self._ld(self.desc.prev_off, LINK_SIZE))
        return off if tag else 0

    def peek_next(self) -> int:
        tag, off = _LINK.unpack(self._pk(self.desc.next_off, LINK_SIZE))
        return off if tag else 0

    def peek_prev(self) -> int:
        tag, off = _LINK.unpack(self._pk(self.desc.prev_off, LINK_SIZE))
        return off if tag else 0

    def set_links(self, next_off: int | None = None, prev_off: int | None = None,
                  persist: bool = True):
        d = self.desc
        if next_off is not None:
            self._st(d.next_off, link(next_off))
        if prev_off is not None:
            self._st(d.prev_off, link(prev_off))
        if persist:
            self._fl(d.next_off, 2 * LINK_SIZE)
            self._fence()

    # values
    def load_value(self, pos: int) -> bytes:
        return self._ld(self.desc.values_off + VALUE_SIZE * pos, VALUE_SIZE)

    def load_key(self, pos: int) -> int:
        return _U64.unpack(self._ld(self.desc.keys_off + KEY_SIZE * pos, KEY_SIZE))[0]

    def peek_value(self, pos: int) -> bytes:
        return self._pk(self.desc.values_off + VALUE_SIZE * pos, VALUE_SIZE)

    def update_value(self, pos: int, value: bytes, fa: str = INDIVIDUAL) -> None:
        off = self.desc.values_off + VALUE_SIZE * pos
        with _fa_scope(self.arena, fa):
            self._st(off, value)
            self._fl(off, VALUE_SIZE)
            self._fence()

    def replace_key(self, pos: int, key: int, fa: str = INDIVIDUAL) -> None:
        """Overwrite the key at ``pos`` in place; the caller keeps the order."""
        off = self.desc.keys_off + KEY_SIZE * pos
        with _fa_scope(self.arena, fa):
            self._st(off, _U64.pack(key))
            self._fl(off, KEY_SIZE)
            if self.kind == HASHING:
                a = self.desc.aux_off + pos
                self._st(a, bytes((fingerprint(key),)))
                self._fl(a, 1)
            self._fence()

    # interface implemented per layout
    def size(self) -> int:
        raise NotImplementedError

    def peek_size(self) -> int:
        raise NotImplementedError

    def positions(self) -> list[int]:
        """Physical positions of valid entries in logical order (uninstrumented)."""
        raise NotImplementedError

    def items(self) -> list[tuple[int, bytes]]:
        """Valid entries sorted by key (uninstrumented)."""
        d = self.desc
        keys = _u64s(self._pk(d.keys_off, KEY_SIZE * d.capacity))
        vals = self._pk(d.values_off, VALUE_SIZE * d.capacity)
        out = [(keys[p], vals[VALUE_SIZE * p:VALUE_SIZE * (p + 1)])
               for p in self.positions()]
        out.sort(key=lambda kv: kv[0])
        return out

    def keys(self) -> list[int]:
        return [k for k, _ in self.items()]

    def min_key(self) -> int:
        return min(self._peek_keys_valid())

    def max_key(self) -> int:
        return max(self._peek_keys_valid())

    def _peek_keys_valid(self) -> list[int]:
        d = self.desc
        keys = _u64s(self._pk(d.keys_off, KEY_SIZE * d.capacity))
        return [keys[p] for p in self.positions()]

    def locate(self, key: int) -> SearchResult:
        raise NotImplementedError

    def search(self, key: int, algorithm: str | None = None) -> SearchResult:
        algo = algorithm or self.default_search
        if algo not in SEARCH_ALGORITHMS[self.kind]:
            raise LayoutMismatch(f"{algo} search not applicable to {self.kind} nodes")
        if self._kern is not None and 0 <= key <= MAX_KEY:
            return SearchResult._make(self._kern.search(
                self._core, self.ref.offset, key, _ALGO_CODE[algo]))
        return getattr(self, "_search_" + algo)(key)

    def get(self, key: int) -> bytes | None:
        r = self.search(key)
        return self.load_value(r.physical_pos) if r.found else None

    def insert(self, key: int, value: bytes, fa: str = INDIVIDUAL,
               pos: SearchResult | None = None, measure: bool = True) -> WriteStats:
        """Insert or update ``key``; returns the counter delta when measured.

        ``pos`` is the result of a prior :meth:`search` for ``key``; without
        it the position is looked up uninstrumented.
        """
        if len(value) != VALUE_SIZE:
            raise ValueError("values are 16-byte records")
        if not 0 <= key < MAX_KEY:
            raise ValueError("key must be an unsigned 64-bit integer below 2**64-1")
        arena = self.arena
        before = arena.counters() if measure else None
        r = pos if pos is not None else self.locate(key)
        if self._kern is not None and fa == INDIVIDUAL and arena.plain:
            if r.found:
                self._kern.update(self._core, self.ref.offset, r.physical_pos, value)
            elif self._kern.insert(self._core, self.ref.offset, key, value,
                                   r.logical_rank) < 0:
                raise NodeFull(f"node holds {self.peek_size()} entries")
            return _delta(arena, before) if measure else None
        with _fa_scope(arena, fa):
            if r.found:
                off = self.desc.values_off + VALUE_SIZE * r.physical_pos
                self._st(off, value)
                self._fl(off, VALUE_SIZE)
                self._fence()
            else:
                self._insert_new(key, value, r)
        return _delta(arena, before) if measure else None

    def erase(self, key: int, fa: str = INDIVIDUAL,
              pos: SearchResult | None = None, measure: bool = True) -> WriteStats:
        arena = self.arena
        before = arena.counters() if measure else None
        r = pos if pos is not None else self.locate(key)
        if not r.found:
            raise KeyAbsent(key)
        if self._kern is not None and fa == INDIVIDUAL and arena.plain:
            self._kern.erase(self._core, self.ref.offset, r.physical_pos, r.logical_rank)
        else:
            with _fa_scope(arena, fa):
                self._erase_at(r)
        return _delta(arena, before) if measure else None

    def _insert_new(self, key, value, r):
        raise NotImplementedError

    def _erase_at(self, r):
        raise NotImplementedError

    # bulk construction (setup, recovery): writes the image in one store
    def build(self, items, *, instrumented: bool = True, next_off: int = 0,
              prev_off: int = 0) -> None:
        """Format the node to hold ``items`` ((key, value) pairs).

        Entries are placed at physical positions 0..n-1 in the given order;
        ordered layouts require sorted input.
        """
        d = self.desc
        items = list(items)
        n = len(items)
        if n > d.capacity:
            raise NodeFull(f"{n} entries exceed capacity {d.capacity}")
        keys = [k for k, _ in items]
        if self.kind in (SORTED, INDIRECTION) and any(
                keys[i] >= keys[i + 1] for i in range(n - 1)):
            raise PreconditionError("ordered layouts need strictly increasing keys")
        img = bytearray(d.node_size)
        img[d.keys_off:d.keys_off + KEY_SIZE * n] = _pack_u64s(keys)
        img[d.values_off:d.values_off + VALUE_SIZE * n] = b"".join(v for _, v in items)
        img[d.next_off:d.next_off + LINK_SIZE] = link(next_off)
        img[d.prev_off:d.prev_off + LINK_SIZE] = link(prev_off)
        self._build_header(img, keys)
        if instrumented:
            self._st(0, bytes(img))
            self._fl(0, d.node_size)
            self._fence()
        else:
            self.arena.poke(self.ref, 0, bytes(img))

    def _build_header(self, img, keys):
        raise NotImplementedError

    def image(self) -> bytes:
        return self._pk(0, self.desc.node_size)

    def dump_text(self) -> str:
        """One line per valid entry: rank, physical position, key, value triple."""
        d = self.desc
        rows = []
        keys = _u64s(self._pk(d.keys_off, KEY_SIZE * d.capacity))
        ordered = sorted(self.positions(), key=lambda p: keys[p])
        for rank, p in enumerate(ordered):
            a, b, c = unpack_value(self.peek_value(p))
            rows.append(f"{rank} {p} {keys[p]} {a} {b} {c!r}")
        return "\n".join(rows) + ("\n" if rows else "")


def _kernel(desc: LayoutDescriptor):
    k = _KERNELS.get(desc)
    if k is None and NodeKernel is not None:
        k = _KERNELS[desc] = NodeKernel(_KIND_CODE[desc.kind], desc.capacity,
                                        desc.keys_off, desc.values_off,
                                        desc.aux_off, desc.bitmap_words)
    return k


def link(offset: int) -> bytes:
    return _LINK.pack(1, offset) if offset else NULL_LINK


class _fa_scope:
    """Wrap a mutation in a transaction when ``fa == TX``."""

    __slots__ = ("arena", "tx")

    def __init__(self, arena, fa):
        if fa not in (INDIVIDUAL, TX):
            raise ValueError(f"unknown failure-atomicity mode {fa!r}")
        self.arena = arena
        self.tx = fa == TX and not arena.in_tx

    def __enter__(self):
        if self.tx:
            self.arena.tx_begin()

    def __exit__(self, exc_type, exc, tb):
        if self.tx:
            if exc_type is None:
                self.arena.tx_commit()
            else:
                self.arena.tx_abort()
        return False


def _delta(arena, before) -> WriteStats:
    after = arena.counters()
    return WriteStats.from_counters([a - b for a, b in zip(after, before)],
                                    arena.line_size)


# -- count-based layouts ----------------------------------------------------

class _CountNode(Node):
    __slots__ = ()

    def size(self) -> int:
        return _U64.unpack(self._ld(0, 8))[0]

    def peek_size(self) -> int:
        if self._kern is not None:
            return self._kern.peek_size(self._core, self.ref.offset)
        return _U64.unpack(self._pk(0, 8))[0]

    def positions(self) -> list[int]:
        return list(range(self.peek_size()))

    def _peek_keys(self, n=None):
        if n is None:
            n = self.peek_size()
        return _u64s(self._pk(self.desc.keys_off, KEY_SIZE * n))

    def _build_header(self, img, keys):
        img[0:8] = _U64.pack(len(keys))

    def _set_count(self, n):
        self._st(0, _U64.pack(n))
        self._fl(0, 8)
        self._fence()

    def _scan(self, key, n, ordered):
        koff = self.desc.keys_off
        for start in range(0, n, 8):
            stop = min(n, start + 8)
            chunk = _u64s(self._ld(koff + KEY_SIZE * start, KEY_SIZE * (stop - start)))
            for i, k in enumerate(chunk):
                if k == key:
                    return SearchResult(True, start + i, start + i if ordered else -1)
                if ordered and k > key:
                    return SearchResult(False, -1, start + i)
        return SearchResult(False, -1, n if ordered else -1)

    def _search_linear(self, key):
        return self._scan(key, self.size(), self.kind == SORTED)

    def _move_entries(self, dst, src, n):
        """Copy n entries from positions src.. to dst.. (instrumented)."""
        d = self.desc
        if n <= 0:
            return
        kb = self._ld(d.keys_off + KEY_SIZE * src, KEY_SIZE * n)
        vb = self._ld(d.values_off + VALUE_SIZE * src, VALUE_SIZE * n)
        self._st(d.keys_off + KEY_SIZE * dst, kb)
        self._st(d.values_off + VALUE_SIZE * dst, vb)

    def _flush_entries(self, lo, hi):
        d = self.desc
        if hi > lo:
            self._fl(d.keys_off + KEY_SIZE * lo, KEY_SIZE * (hi - lo))
            self._fl(d.values_off + VALUE_SIZE * lo, VALUE_SIZE * (hi - lo))

    def _put(self, pos, key, value):
        d = self.desc
        self._st(d.keys_off + KEY_SIZE * pos, _U64.pack(key))
        self._st(d.values_off + VALUE_SIZE * pos, value)


class SortedNode(_CountNode):
    kind = SORTED
    default_search = "binary"
    __slots__ = ()

    def locate(self, key):
        keys = self._peek_keys()
        lo, hi = 0, len(keys)
        while lo < hi:
            mid = (lo + hi) // 2
            if keys[mid] < key:
                lo = mid + 1
            else:
                hi = mid
        if lo < len(keys) and keys[lo] == key:
            return SearchResult(True, lo, lo)
        return SearchResult(False, -1, lo)

    def _search_binary(self, key):
        n = self.size()
        koff = self.desc.keys_off
        lo, hi = 0, n
        while lo < hi:
            mid = (lo + hi) // 2
            k = _U64.unpack(self._ld(koff + KEY_SIZE * mid, KEY_SIZE))[0]
            if k < key:
                lo = mid + 1
            elif k == key:
                return SearchResult(True, mid, mid)
            else:
                hi = mid
        return SearchResult(False, -1, lo)

    def upper_bound(self, key) -> int:
        """Rank of the first key greater than ``key`` (instrumented)."""
        n = self.size()
        koff = self.desc.keys_off
        lo, hi = 0, n
        while lo < hi:
            mid = (lo + hi) // 2
            if _U64.unpack(self._ld(koff + KEY_SIZE * mid, KEY_SIZE))[0] <= key:
                lo = mid + 1
            else:
                hi = mid
        return lo

    def physical(self, rank: int) -> int:
        return rank

    def _insert_new(self, key, value, r):
        n = self.peek_size()
        if n >= self.desc.capacity:
            raise NodeFull(f"node holds {n} entries")
        pos = r.logical_rank
        self._move_entries(pos + 1, pos, n - pos)
        self._put(pos, key, value)
        self._flush_entries(pos, n + 1)
        self._fence()
        self._set_count(n + 1)

    def _erase_at(self, r):
        n = self.peek_size()
        pos = r.physical_pos
        self._move_entries(pos, pos + 1, n - pos - 1)
        self._flush_entries(pos, n - 1)
        if pos < n - 1:
            self._fence()
        self._set_count(n - 1)


class UnsortedNode(_CountNode):
    kind = UNSORTED
    default_search = "linear"
    __slots__ = ()

    def locate(self, key):
        keys = self._peek_keys()
        try:
            p = keys.index(key)
        except ValueError:
            return SearchResult(False, -1, -1)
        return SearchResult(True, p, -1)

    def _insert_new(self, key, value, r):
        n = self.peek_size()
        if n >= self.desc.capacity:
            raise NodeFull(f"node holds {n} entries")
        self._put(n, key, value)
        self._flush_entries(n, n + 1)
        self._fence()
        self._set_count(n + 1)

    def _erase_at(self, r):
        n = self.peek_size()
        pos = r.physical_pos
        if pos != n - 1:
            self._move_entries(pos, n - 1, 1)
            self._flush_entries(pos, pos + 1)
            self._fence()
        self._set_count(n - 1)


# -- bitmap-based layouts ---------------------------------------------------

def _set_bits(bits: int):
    while bits:
        low = bits & -bits
        yield low.bit_length() - 1
        bits ^= low


def _first_zero(bits: int) -> int:
    return (~bits & (bits + 1)).bit_length() - 1


class BitmapNode(Node):
    kind = BITMAP
    default_search = "bitmap_linear"
    __slots__ = ()

    def _bits(self, instrumented=True) -> int:
        raw = (self._ld if instrumented else self._pk)(0, 8 * self.desc.bitmap_words)
        return int.from_bytes(raw, "little")

    def size(self) -> int:
        return self._bits().bit_count()

    def peek_size(self) -> int:
        if self._kern is not None:
            return self._kern.peek_size(self._core, self.ref.offset)
        return self._bits(False).bit_count()

    def positions(self) -> list[int]:
        return list(_set_bits(self._bits(False)))

    def _build_header(self, img, keys):
        n = len(keys)
        img[0:8 * self.desc.bitmap_words] = ((1 << n) - 1).to_bytes(
            8 * self.desc.bitmap_words, "little")

    def _store_bits(self, old: int, new: int, flush: bool = True) -> None:
        """Store the bitmap words that differ between ``old`` and ``new``."""
        diff = old ^ new
        w = 0
        while diff:
            if diff & _M64:
                word = (new >> (64 * w)) & _M64
                self._st(8 * w, _U64.pack(word))
                if flush:
                    self._fl(8 * w, 8)
            diff >>= 64
            w += 1

    def _free_position(self, bits: int) -> int:
        p = _first_zero(bits)
        if p >= self.desc.capacity:
            raise NodeFull("no free slot")
        return p

    def locate(self, key):
        bits = self._bits(False)
        keys = _u64s(self._pk(self.desc.keys_off, KEY_SIZE * self.desc.capacity))
        for p in _set_bits(bits):
            if keys[p] == key:
                return SearchResult(True, p, -1)
        return SearchResult(False, -1, -1)

    def _search_bitmap_linear(self, key):
        bits = self._bits()
        koff = self.desc.keys_off
        cap = self.desc.capacity
        for start in range(0, cap, 8):
            mask = (bits >> start) & 0xFF
            if not mask:
                continue
            stop = min(cap, start + 8)
            chunk = _u64s(self._ld(koff + KEY_SIZE * start, KEY_SIZE * (stop - start)))
            for i, k in enumerate(chunk):
                if mask >> i & 1 and k == key:
                    return SearchResult(True, start + i, self._rank_hint(start + i))
        return SearchResult(False, -1, -1)

    def _rank_hint(self, pos):
        return -1

    def _put(self, pos, key, value):
        d = self.desc
        self._st(d.keys_off + KEY_SIZE * pos, _U64.pack(key))
        self._st(d.values_off + VALUE_SIZE * pos, value)
        self._fl(d.keys_off + KEY_SIZE * pos, KEY_SIZE)
        self._fl(d.values_off + VALUE_SIZE * pos, VALUE_SIZE)

    def _insert_new(self, key, value, r):
        bits = self._bits()
        pos = self._free_position(bits)
        self._put(pos, key, value)
        self._fence()
        self._store_bits(bits, bits | (1 << pos))
        self._fence()

    def _erase_at(self, r):
        bits = self._bits()
        self._store_bits(bits, bits & ~(1 << r.physical_pos))
        self._fence()


class HashingNode(BitmapNode):
    kind = HASHING
    default_search = "hash_probe"
    __slots__ = ()

    def _build_header(self, img, keys):
        super()._build_header(img, keys)
        a = self.desc.aux_off
        img[a:a + len(keys)] = bytes(fingerprint(k) for k in keys)

    def _search_hash_probe(self, key):
        bits = self._bits()
        fpb = bytes((fingerprint(key),))
        d = self.desc
        base = d.aux_off
        for lo, hi in _lines(base, base + d.capacity):
            piece = self._ld(lo, hi - lo)
            i = piece.find(fpb)
            while i >= 0:
                p = lo - base + i
                if bits >> p & 1 and self.load_key(p) == key:
                    return SearchResult(True, p, -1)
                i = piece.find(fpb, i + 1)
        return SearchResult(False, -1, -1)

    def _put(self, pos, key, value):
        super()._put(pos, key, value)
        a = self.desc.aux_off + pos
        self._st(a, bytes((fingerprint(key),)))
        self._fl(a, 1)

    def _erase_at(self, r):
        # the fingerprint is invalidated together with the validity bit
        bits = self._bits()
        a = self.desc.aux_off + r.physical_pos
        self._st(a, b"\x00")
        self._fl(a, 1)
        self._store_bits(bits, bits & ~(1 << r.physical_pos))
        self._fence()


class IndirectionNode(BitmapNode):
    kind = INDIRECTION
    default_search = "indirect_binary"
    __slots__ = ()

    def _slots(self, n, instrumented=True) -> bytes:
        return (self._ld if instrumented else self._pk)(self.desc.aux_off, n)

    def positions(self) -> list[int]:
        return list(self._slots(self.peek_size(), False))

    def _build_header(self, img, keys):
        super()._build_header(img, keys)
        a = self.desc.aux_off
        img[a:a + len(keys)] = bytes(range(len(keys)))

    def locate(self, key):
        n = self.peek_size()
        slots = self._slots(n, False)
        keys = _u64s(self._pk(self.desc.keys_off, KEY_SIZE * self.desc.capacity))
        lo, hi = 0, n
        while lo < hi:
            mid = (lo + hi) // 2
            if keys[slots[mid]] < key:
                lo = mid + 1
            else:
                hi = mid
        if lo < n and keys[slots[lo]] == key:
            return SearchResult(True, slots[lo], lo)
        return SearchResult(False, -1, lo)

    def _slot(self, rank):
        return self._ld(self.desc.aux_off + rank, 1)[0]

    def _search_indirect_binary(self, key):
        n = self.size()
        lo, hi = 0, n
        while lo < hi:
            mid = (lo + hi) // 2
            p = self._slot(mid)
            k = self.load_key(p)
            if k < key:
                lo = mid + 1
            elif k == key:
                return SearchResult(True, p, mid)
            else:
                hi = mid
        return SearchResult(False, -1, lo)

    def upper_bound(self, key) -> int:
        n = self.size()
        lo, hi = 0, n
        while lo < hi:
            mid = (lo + hi) // 2
            if self.load_key(self._slot(mid)) <= key:
                lo = mid + 1
            else:
                hi = mid
        return lo

    def physical(self, rank: int) -> int:
        return self._slot(rank)

    def _insert_new(self, key, value, r):
        bits = self._bits()
        n = bits.bit_count()
        pos = self._free_position(bits)
        self._put(pos, key, value)
        self._fence()
        rank = r.logical_rank
        a = self.desc.aux_off
        tail = self._ld(a + rank, n - rank)
        self._st(a + rank, bytes((pos,)) + tail)
        self._fl(a + rank, n - rank + 1)
        self._store_bits(bits, bits | (1 << pos))
        self._fence()

    def _erase_at(self, r):
        bits = self._bits()
        n = bits.bit_count()
        rank = r.logical_rank
        if rank < 0:
            rank = self._slots(n, False).index(r.physical_pos)
        a = self.desc.aux_off
        if rank < n - 1:
            tail = self._ld(a + rank + 1, n - rank - 1)
            self._st(a + rank, tail)
            self._fl(a + rank, n - rank - 1)
        self._store_bits(bits, bits & ~(1 << r.physical_pos))
        self._fence()


NODE_CLASSES = {
    SORTED: SortedNode,
    UNSORTED: UnsortedNode,
    BITMAP: BitmapNode,
    INDIRECTION: IndirectionNode,
    HASHING: HashingNode,
}


def open_node(arena, ref: PRef, desc: LayoutDescriptor) -> Node:
    return NODE_CLASSES[desc.kind](arena, ref, desc)


def allocate_node(arena, desc: LayoutDescriptor, fa: str = INDIVIDUAL) -> PRef:
    """Allocate a node-sized region inside an allocation-only transaction."""
    if arena.in_tx or not arena.persistent:
        return arena.allocate(desc.node_size, LINE)
    arena.tx_begin()
    try:
        ref = arena.allocate(desc.node_size, LINE)
    except BaseException:
        arena.tx_abort()
        raise
    arena.tx_commit()
    return ref


def new_node(arena, kind: str, node_size: int, cap: int | None = None,
             items=(), instrumented: bool = True) -> Node:
    desc = describe(kind, node_size, cap)
    ref = allocate_node(arena, desc)
    node = open_node(arena, ref, desc)
    node.build(items, instrumented=instrumented)
    return node


# -- structural micro-operations --------------------------------------------

def quickselect(values: list[int], k: int) -> int:
    """k-th smallest element (0-based), median-of-three pivot, deterministic."""
    a = list(values)
    lo, hi = 0, len(a) - 1
    if not 0 <= k <= hi:
        raise IndexError("selection rank out of range")
    while True:
        if lo == hi:
            return a[lo]
        mid = (lo + hi) // 2
        x, y, z = a[lo], a[mid], a[hi]
        pivot = sorted((x, y, z))[1]
        i, j = lo, hi
        while i <= j:
            while a[i] < pivot:
                i += 1
            while a[j] > pivot:
                j -= 1
            if i <= j:
                a[i], a[j] = a[j], a[i]
                i += 1
                j -= 1
        if k <= j:
            hi = j
        elif k >= i:
            lo = i
        else:
            return a[k]


def _load_all_keys(node: Node) -> list[int]:
    d = node.desc
    return _u64s(node._ld(d.keys_off, KEY_SIZE * d.capacity))


def split(node: Node, strategy: str = MOVE, fa: str = INDIVIDUAL,
          allocator=None) -> tuple[Node, Node, int]:
    """Split a node; the left keeps the floor(n/2) smallest entries.

    Returns ``(left, right, separator)`` where ``separator`` is the largest
    key of the left node.  ``allocator(desc) -> PRef`` overrides where the
    new node comes from.
    """
    if strategy not in (MOVE, COPY):
        raise ValueError(f"unknown split strategy {strategy!r}")
    if strategy == COPY and not node.desc.has_bitmap:
        raise LayoutMismatch("copy split needs a bitmap-bearing layout")
    arena = node.arena
    n = node.peek_size()
    if n < 2:
        raise PreconditionError("cannot split a node with fewer than two entries")
    with _fa_scope(arena, fa):
        ref = allocator(node.desc) if allocator else allocate_node(arena, node.desc)
        right = open_node(arena, ref, node.desc)
        old_next = node.peek_next()
        if strategy == COPY:
            sep = _split_copy(node, right, n)
        else:
            sep = _SPLIT_MOVE[node.kind](node, right, n)
        if old_next:
            nxt = open_node(arena, PRef(old_next, node.desc.node_size), node.desc)
            nxt.set_links(prev_off=right.ref.offset)
    return node, right, sep


def _right_image(node: Node, right: Node, keys, values) -> bytearray:
    d = node.desc
    img = bytearray(d.node_size)
    g = len(keys)
    img[d.keys_off:d.keys_off + KEY_SIZE * g] = _pack_u64s(keys)
    img[d.values_off:d.values_off + VALUE_SIZE * g] = b"".join(values)
    img[d.next_off:d.next_off + LINK_SIZE] = link(node.peek_next())
    img[d.prev_off:d.prev_off + LINK_SIZE] = link(node.ref.offset)
    right._build_header(img, keys)
    return img


def _write_right(right: Node, img, extent: int):
    """Store and persist the used prefix pieces of a fresh right node."""
    d = right.desc
    right._st(0, bytes(img[:d.header_bytes]))
    right._fl(0, d.header_bytes)
    if extent:
        right._st(d.keys_off, bytes(img[d.keys_off:d.keys_off + KEY_SIZE * extent]))
        right._st(d.values_off,
                  bytes(img[d.values_off:d.values_off + VALUE_SIZE * extent]))
        right._fl(d.keys_off, KEY_SIZE * extent)
        right._fl(d.values_off, VALUE_SIZE * extent)
    right._fence()


def _split_sorted(node: Node, right: Node, n: int) -> int:
    d = node.desc
    h = n // 2
    g = n - h
    keys = _u64s(node._ld(d.keys_off + KEY_SIZE * h, KEY_SIZE * g))
    vb = node._ld(d.values_off + VALUE_SIZE * h, VALUE_SIZE * g)
    values = [vb[VALUE_SIZE * i:VALUE_SIZE * (i + 1)] for i in range(g)]
    sep = node.load_key(h - 1)
    _write_right(right, _right_image(node, right, keys, values), g)
    node._st(0, _U64.pack(h) + link(right.ref.offset))
    node._fl(0, 8 + LINK_SIZE)
    node._fence()
    return sep


def _split_unsorted(node: Node, right: Node, n: int) -> int:
    d = node.desc
    h = n // 2
    keys = _u64s(node._ld(d.keys_off, KEY_SIZE * n))
    sep = quickselect(keys, h - 1)
    greater = [i for i in range(n) if keys[i] > sep]
    values = [node.load_value(i) for i in greater]
    _write_right(right, _right_image(node, right, [keys[i] for i in greater], values),
                 len(greater))
    holes = [i for i in greater if i < h]
    movers = [i for i in range(h, n) if keys[i] <= sep]
    for hole, src in zip(holes, movers):
        node._move_entries(hole, src, 1)
        node._flush_entries(hole, hole + 1)
    if holes:
        node._fence()
    node._st(0, _U64.pack(h) + link(right.ref.offset))
    node._fl(0, 8 + LINK_SIZE)
    node._fence()
    return sep


def _split_bitmap(node: BitmapNode, right: BitmapNode, n: int) -> int:
    d = node.desc
    bits = node._bits()
    h = n // 2
    keys = _load_all_keys(node)
    valid = list(_set_bits(bits))
    sep = quickselect([keys[p] for p in valid], h - 1)
    greater = [p for p in valid if keys[p] > sep]
    values = [node.load_value(p) for p in greater]
    _write_right(right, _right_image(node, right, [keys[p] for p in greater], values),
                 len(greater))
    new_bits = bits
    for p in greater:
        new_bits &= ~(1 << p)
    node._store_bits(bits, new_bits)
    node.set_links(next_off=right.ref.offset, persist=False)
    node._fl(d.next_off, LINK_SIZE)
    node._fence()
    return sep


def _split_indirection(node: IndirectionNode, right: IndirectionNode, n: int) -> int:
    d = node.desc
    bits = node._bits()
    slots = node._slots(n)
    h = n // 2
    moved = slots[h:n]
    keys = [node.load_key(p) for p in moved]
    values = [node.load_value(p) for p in moved]
    sep = node.load_key(slots[h - 1])
    _write_right(right, _right_image(node, right, keys, values), len(moved))
    new_bits = bits
    for p in moved:
        new_bits &= ~(1 << p)
    node._store_bits(bits, new_bits)
    node.set_links(next_off=right.ref.offset, persist=False)
    node._fl(d.next_off, LINK_SIZE)
    node._fence()
    return sep


_SPLIT_MOVE = {
    SORTED: _split_sorted,
    UNSORTED: _split_unsorted,
    BITMAP: _split_bitmap,
    HASHING: _split_bitmap,
    INDIRECTION: _split_indirection,
}


def _split_copy(node: BitmapNode, right: BitmapNode, n: int) -> int:
    """Copy the whole node, then hand each side its half through the bitmap."""
    d = node.desc
    img = bytearray(node._ld(0, d.node_size))
    bits = int.from_bytes(img[:8 * d.bitmap_words], "little")
    h = n // 2
    if node.kind == INDIRECTION:
        slots = bytes(img[d.aux_off:d.aux_off + n])
        moved = list(slots[h:n])
        ko = d.keys_off
        sep = _U64.unpack_from(img, ko + KEY_SIZE * slots[h - 1])[0]
        img[d.aux_off:d.aux_off + len(moved)] = bytes(moved)
    else:
        keys = _u64s(bytes(img[d.keys_off:d.keys_off + KEY_SIZE * d.capacity]))
        valid = list(_set_bits(bits))
        sep = quickselect([keys[p] for p in valid], h - 1)
        moved = [p for p in valid if keys[p] > sep]
    moved_bits = 0
    for p in moved:
        moved_bits |= 1 << p
    img[:8 * d.bitmap_words] = moved_bits.to_bytes(8 * d.bitmap_words, "little")
    img[d.next_off:d.next_off + LINK_SIZE] = link(node.peek_next())
    img[d.prev_off:d.prev_off + LINK_SIZE] = link(node.ref.offset)
    right._st(0, bytes(img))
    right._fl(0, d.node_size)
    right._fence()
    node._store_bits(bits, bits & ~moved_bits)
    node.set_links(next_off=right.ref.offset, persist=False)
    node._fl(d.next_off, LINK_SIZE)
    node._fence()
    return sep


def unlink(node: Node) -> None:
    """Remove a node from its sibling chain (before deallocation)."""
    prev_off, next_off = node.peek_prev(), node.peek_next()
    size = node.desc.node_size
    if prev_off:
        open_node(node.arena, PRef(prev_off, size), node.desc).set_links(
            next_off=next_off)
    if next_off:
        open_node(node.arena, PRef(next_off, size), node.desc).set_links(
            prev_off=prev_off)


def balance(donor: Node, receiver: Node, direction: str, count: int | None = None,
            check: bool = True) -> None:
    """Move boundary entries from ``donor`` to the key-adjacent ``receiver``.

    ``direction`` names where the receiver sits: ``toLower`` moves the
    donor's smallest entries down, ``toHigher`` its largest entries up.
    Without ``count`` the benchmark setting applies: a full donor hands a
    quarter of its capacity to a receiver holding floor(M/2)-1 entries.
    """
    if direction not in (TO_LOWER, TO_HIGHER):
        raise ValueError(f"unknown direction {direction!r}")
    if donor.kind != receiver.kind or donor.desc != receiver.desc:
        raise LayoutMismatch("balance needs two nodes of the same layout")
    m = donor.desc.capacity
    dn, rn = donor.peek_size(), receiver.peek_size()
    if count is None:
        count = m // 4
        if check and (dn != m or rn != m // 2 - 1):
            raise PreconditionError(
                f"balance expects a full donor and a receiver with {m // 2 - 1} "
                f"entries, got {dn} and {rn}")
    if count < 1 or count > dn or rn + count > m:
        raise PreconditionError(f"cannot move {count} entries ({dn} -> {rn}, M={m})")
    if check and dn and rn:
        if direction == TO_LOWER and receiver.max_key() >= donor.min_key():
            raise PreconditionError("receiver keys must all be smaller than donor keys")
        if direction == TO_HIGHER and receiver.min_key() <= donor.max_key():
            raise PreconditionError("receiver keys must all be larger than donor keys")
    _BALANCE[donor.kind](donor, receiver, direction, count, dn, rn)


def _balance_sorted(donor, receiver, direction, q, dn, rn):
    if direction == TO_LOWER:
        kb, vb = _load_range(donor, 0, q)
        _store_range(receiver, rn, kb, vb)
        receiver._flush_entries(rn, rn + q)
        receiver._fence()
        receiver._set_count(rn + q)
        donor._move_entries(0, q, dn - q)
        donor._flush_entries(0, dn - q)
        donor._fence()
        donor._set_count(dn - q)
    else:
        kb, vb = _load_range(donor, dn - q, q)
        receiver._move_entries(q, 0, rn)
        _store_range(receiver, 0, kb, vb)
        receiver._flush_entries(0, rn + q)
        receiver._fence()
        receiver._set_count(rn + q)
        donor._set_count(dn - q)


def _load_range(node, lo, n):
    d = node.desc
    return (node._ld(d.keys_off + KEY_SIZE * lo, KEY_SIZE * n),
            node._ld(d.values_off + VALUE_SIZE * lo, VALUE_SIZE * n))


def _store_range(node, lo, kb, vb):
    d = node.desc
    node._st(d.keys_off + KEY_SIZE * lo, kb)
    node._st(d.values_off + VALUE_SIZE * lo, vb)


def _extremum(keys, candidates, lowest):
    pick = min if lowest else max
    return pick(candidates, key=keys.__getitem__)


def _balance_unsorted(donor, receiver, direction, q, dn, rn):
    lowest = direction == TO_LOWER
    dkeys = _u64s(donor._ld(donor.desc.keys_off, KEY_SIZE * dn))
    n = dn
    for i in range(q):
        # the next extremum has to be searched before every move
        p = _extremum(dkeys, range(n), lowest)
        receiver._put(rn + i, dkeys[p], donor.load_value(p))
        if p != n - 1:
            donor._move_entries(p, n - 1, 1)
            donor._flush_entries(p, p + 1)
            dkeys[p] = dkeys[n - 1]
        n -= 1
    receiver._flush_entries(rn, rn + q)
    receiver._fence()
    receiver._set_count(rn + q)
    donor._set_count(dn - q)


def _balance_bitmap(donor, receiver, direction, q, dn, rn):
    lowest = direction == TO_LOWER
    dbits = donor._bits()
    rbits = receiver._bits()
    dkeys = _load_all_keys(donor)
    new_d, new_r = dbits, rbits
    for _ in range(q):
        p = _extremum(dkeys, list(_set_bits(new_d)), lowest)
        free = receiver._free_position(new_r)
        receiver._put(free, dkeys[p], donor.load_value(p))
        new_d &= ~(1 << p)
        new_r |= 1 << free
    receiver._fence()
    receiver._store_bits(rbits, new_r)
    receiver._fence()
    donor._store_bits(dbits, new_d)
    donor._fence()


def _balance_indirection(donor, receiver, direction, q, dn, rn):
    dbits = donor._bits()
    rbits = receiver._bits()
    dslots = donor._slots(dn)
    rslots = receiver._slots(rn)
    moved = dslots[:q] if direction == TO_LOWER else dslots[dn - q:]
    new_r = rbits
    placed = []
    for p in moved:
        free = receiver._free_position(new_r)
        receiver._put(free, donor.load_key(p), donor.load_value(p))
        new_r |= 1 << free
        placed.append(free)
    receiver._fence()
    ra, da = receiver.desc.aux_off, donor.desc.aux_off
    if direction == TO_LOWER:
        receiver._st(ra + rn, bytes(placed))
        receiver._fl(ra + rn, q)
    else:
        receiver._st(ra, bytes(placed) + rslots)
        receiver._fl(ra, q + rn)
    receiver._store_bits(rbits, new_r)
    receiver._fence()
    if direction == TO_LOWER and dn > q:
        donor._st(da, dslots[q:])
        donor._fl(da, dn - q)
    new_d = dbits
    for p in moved:
        new_d &= ~(1 << p)
    donor._store_bits(dbits, new_d)
    donor._fence()


_BALANCE = {
    SORTED: _balance_sorted,
    UNSORTED: _balance_unsorted,
    BITMAP: _balance_bitmap,
    HASHING: _balance_bitmap,
    INDIRECTION: _balance_indirection,
}


def merge_nodes(left: Node, right: Node, check: bool = True) -> Node:
    """Append all of ``right``'s entries to ``left`` (the lower-key node).

    ``right`` stays linked; call :func:`unlink` before releasing it.
    """
    if left.desc != right.desc:
        raise LayoutMismatch("merge needs two nodes of the same layout")
    ln, rn = left.peek_size(), right.peek_size()
    if ln + rn > left.desc.capacity:
        raise PreconditionError(
            f"merged size {ln + rn} exceeds capacity {left.desc.capacity}")
    if check and ln and rn and left.max_key() >= right.min_key():
        raise PreconditionError("left node must hold the smaller keys")
    if rn:
        _MERGE[left.kind](left, right, ln, rn)
    return left


def _merge_counted(left, right, ln, rn):
    kb, vb = _load_range(right, 0, rn)
    _store_range(left, ln, kb, vb)
    left._flush_entries(ln, ln + rn)
    left._fence()
    left._set_count(ln + rn)


def _merge_bitmap(left, right, ln, rn):
    lbits = left._bits()
    rbits = right._bits()
    new_l = lbits
    if left.kind == INDIRECTION:
        order = list(right._slots(rn))
    else:
        order = list(_set_bits(rbits))
    placed = []
    for p in order:
        free = left._free_position(new_l)
        left._put(free, right.load_key(p), right.load_value(p))
        new_l |= 1 << free
        placed.append(free)
    left._fence()
    if left.kind == INDIRECTION:
        a = left.desc.aux_off
        left._st(a + ln, bytes(placed))
        left._fl(a + ln, rn)
    left._store_bits(lbits, new_l)
    left._fence()


_MERGE = {
    SORTED: _merge_counted,
    UNSORTED: _merge_counted,
    BITMAP: _merge_bitmap,
    HASHING: _merge_bitmap,
    INDIRECTION: _merge_bitmap,
}


def lower_bound_child(inner: Node, key: int) -> int:
    """Index of the first separator greater than ``key``.

    Inner nodes store one (upper bound, child) entry per child, the last
    bound being ``MAX_KEY``; the returned index is therefore the number of
    real separators not greater than ``key``.
    """
    if inner.kind not in INNER_LAYOUTS:
        raise LayoutMismatch(f"{inner.kind} nodes cannot route key ranges")
    return inner.upper_bound(key)
