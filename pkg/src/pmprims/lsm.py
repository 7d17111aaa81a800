"""LSM-style level primitives: moving a DRAM buffer into a persistent run and
merging a full level into the next one.

Arena layout (all inside one persistent arena)::

    root area   magic | K | C0 | levels | first run offset   (offset 0)
                head[i] (8-byte run count of level i, offset 64 + 8 i)
    heap        level i: K run regions of 64 + 24 * C_i bytes, C_i = C0 * K**i
                two scratch regions for direct 2-way merges

A run region starts with a 64-byte header holding the entry count, followed
by ``(key, value)`` pairs in key order.  A level's head word is the single
source of truth for which runs are valid: runs ``[0, head)``.  Within a level
a higher run index is newer; across levels the lower level is newer.
"""

from __future__ import annotations

import heapq
import struct
from bisect import bisect_left

from .nodes import MAX_KEY, VALUE_SIZE
from .pstore import Arena, PRef, WriteStats

TX = "tx"
INDIVIDUAL = "individual"
NONE = "none"
FA_STRATEGIES = (TX, INDIVIDUAL, NONE)

SORTED_VECTOR = "sorted_vector"
UNSORTED_HASH = "unsorted_hash"
ORGANIZATIONS = (SORTED_VECTOR, UNSORTED_HASH)

TWO_WAY = "2way"
K_WAY = "kway"

LSM_MAGIC = 0x4D534C504D5000  # "\0PMPLSM"
RUN_HEADER = 64
PAIR = 8 + VALUE_SIZE
HEADS_OFF = 64
_ROOT = struct.Struct("<5Q")
_U64 = struct.Struct("<Q")


class LsmError(Exception):
    pass


class BufferFull(LsmError):
    pass


class LevelFull(LsmError):
    pass


class LevelCorrupt(LsmError):
    pass


def run_capacity(node_size: int) -> int:
    """Entries in a level-0 run sized like one node."""
    return (node_size - RUN_HEADER) // PAIR


class DramBuffer:
    """Volatile write buffer kept either sorted or as an unordered hash."""

    def __init__(self, capacity: int, organization: str = SORTED_VECTOR):
        if organization not in ORGANIZATIONS:
            raise ValueError(f"unknown buffer organization {organization!r}")
        self.capacity = capacity
        self.organization = organization
        self._keys: list[int] = []
        self._vals: list[bytes] = []
        self._map: dict[int, bytes] = {}

    def __len__(self):
        return len(self._keys) if self.organization == SORTED_VECTOR else len(self._map)

    @property
    def full(self) -> bool:
        return len(self) >= self.capacity

    def insert(self, key: int, value: bytes) -> None:
        if not 0 <= key < MAX_KEY:
            raise ValueError("key out of range")
        if self.organization == SORTED_VECTOR:
            i = bisect_left(self._keys, key)
            if i < len(self._keys) and self._keys[i] == key:
                self._vals[i] = value
                return
            if self.full:
                raise BufferFull(f"buffer holds {self.capacity} entries")
            self._keys.insert(i, key)
            self._vals.insert(i, value)
        else:
            if key not in self._map and self.full:
                raise BufferFull(f"buffer holds {self.capacity} entries")
            self._map[key] = value

    def __iter__(self):
        """Entries in buffer order (key order only for the sorted vector)."""
        if self.organization == SORTED_VECTOR:
            return iter(list(zip(self._keys, self._vals)))
        return iter(list(self._map.items()))

    def sorted_items(self) -> list[tuple[int, bytes]]:
        if self.organization == SORTED_VECTOR:
            return list(zip(self._keys, self._vals))
        return sorted(self._map.items())

    def clear(self) -> None:
        self._keys.clear()
        self._vals.clear()
        self._map.clear()


def _run_image(items) -> bytes:
    body = b"".join(_U64.pack(k) + v for k, v in items)
    return _U64.pack(len(items)) + bytes(RUN_HEADER - 8) + body


def _parse_pairs(raw: bytes, n: int) -> list[tuple[int, bytes]]:
    return [(_U64.unpack_from(raw, PAIR * i)[0], raw[PAIR * i + 8:PAIR * (i + 1)])
            for i in range(n)]


def merge_newest_wins(older, newer) -> list[tuple[int, bytes]]:
    """Merge two sorted runs; on equal keys the entry from ``newer`` survives."""
    out = []
    i = j = 0
    while i < len(older) and j < len(newer):
        ko, kn = older[i][0], newer[j][0]
        if ko < kn:
            out.append(older[i])
            i += 1
        elif kn < ko:
            out.append(newer[j])
            j += 1
        else:
            out.append(newer[j])
            i += 1
            j += 1
    out.extend(older[i:])
    out.extend(newer[j:])
    return out


def kway_newest_wins(runs) -> list[tuple[int, bytes]]:
    """Heap-based K-input merge; ``runs`` ordered oldest to newest."""
    heap = [(run[0][0], -idx, 0) for idx, run in enumerate(runs) if run]
    heapq.heapify(heap)
    out = []
    while heap:
        key, neg, pos = heapq.heappop(heap)
        run = runs[-neg]
        if not out or out[-1][0] != key:
            out.append(run[pos])
        if pos + 1 < len(run):
            heapq.heappush(heap, (run[pos + 1][0], neg, pos + 1))
    return out


class LsmStore:
    """A hierarchy of levels of fixed-size sorted runs in one arena."""

    def __init__(self, arena: Arena, *, runs_per_level: int = 4, node_size: int = 1024,
                 levels: int = 2, run_capacity0: int | None = None,
                 _create: bool = True):
        if runs_per_level < 2:
            raise ValueError("a level needs at least two runs")
        if not 1 <= levels <= (arena.root_size - HEADS_OFF) // 8:
            raise ValueError("level count does not fit the root area")
        self.arena = arena
        self.K = runs_per_level
        self.C0 = run_capacity0 if run_capacity0 is not None else run_capacity(node_size)
        if self.C0 < 1:
            raise ValueError("runs must hold at least one entry")
        self.levels = levels
        self._runs: list[list[PRef]] = []
        self._scratch: list[PRef] = []
        if _create:
            self._lay_out()
            root = arena.root
            arena.poke(root, 0, _ROOT.pack(LSM_MAGIC, self.K, self.C0, levels,
                                           self._runs[0][0].offset))
            arena.poke(root, HEADS_OFF, bytes(8 * levels))

    def _lay_out(self) -> None:
        for i in range(self.levels):
            size = RUN_HEADER + PAIR * self.capacity(i)
            self._runs.append([self.arena.allocate(size) for _ in range(self.K)])
        largest = RUN_HEADER + PAIR * self.K * self.capacity(max(self.levels - 2, 0))
        self._scratch = [self.arena.allocate(largest) for _ in range(2)]
        self.arena.reset_stats()

    def capacity(self, level: int) -> int:
        return self.C0 * self.K ** level

    def run_ref(self, level: int, index: int) -> PRef:
        return self._runs[level][index]

    # -- heads ----------------------------------------------------------------

    def head(self, level: int) -> int:
        return _U64.unpack(self.arena.load(self.arena.root, HEADS_OFF + 8 * level, 8))[0]

    def peek_head(self, level: int) -> int:
        return _U64.unpack(self.arena.peek(self.arena.root, HEADS_OFF + 8 * level, 8))[0]

    def _store_head(self, level: int, value: int) -> None:
        self.arena.store(self.arena.root, HEADS_OFF + 8 * level, _U64.pack(value))

    def _flush_head(self, level: int) -> None:
        self.arena.flush(self.arena.root, HEADS_OFF + 8 * level, 8)

    def _publish(self, updates: dict[int, int], fa: str) -> None:
        """Make head changes durable according to the FA strategy."""
        arena = self.arena
        if fa == NONE:
            for level, value in updates.items():
                self._store_head(level, value)
                self._flush_head(level)
                arena.fence()
            return
        own_tx = not arena.in_tx
        if own_tx:
            arena.tx_begin()
        lo, hi = min(updates), max(updates)
        arena.tx_snapshot(arena.root, HEADS_OFF + 8 * lo, 8 * (hi - lo + 1))
        for level, value in updates.items():
            self._store_head(level, value)
            self._flush_head(level)
        if own_tx:
            arena.tx_commit()

    # -- runs -----------------------------------------------------------------

    def load_run(self, level: int, index: int) -> list[tuple[int, bytes]]:
        """Read a run through instrumented loads."""
        ref = self.run_ref(level, index)
        n = _U64.unpack(self.arena.load(ref, 0, 8))[0]
        if n > self.capacity(level):
            raise LevelCorrupt(f"run {level}/{index} claims {n} entries")
        return _parse_pairs(self.arena.load(ref, RUN_HEADER, PAIR * n), n) if n else []

    def peek_run(self, level: int, index: int) -> list[tuple[int, bytes]]:
        ref = self.run_ref(level, index)
        n = _U64.unpack(self.arena.peek(ref, 0, 8))[0]
        if n > self.capacity(level):
            raise LevelCorrupt(f"run {level}/{index} claims {n} entries")
        return _parse_pairs(self.arena.peek(ref, RUN_HEADER, PAIR * n), n) if n else []

    def _write_run(self, ref: PRef, items, snapshot: int | None = None,
                   flush: bool = True) -> None:
        img = _run_image(items)
        if snapshot is not None:
            self.arena.tx_snapshot(ref, 0, min(snapshot, ref.length))
        self.arena.store(ref, 0, img)
        if flush:
            self.arena.flush(ref, 0, len(img))

    # -- move -----------------------------------------------------------------

    def move_node(self, buffer: DramBuffer, fa: str = INDIVIDUAL, level: int = 0) -> WriteStats:
        """Persist a full buffer as the next run of ``level``."""
        _check_fa(fa)
        before = self.arena.counters()
        h = self.head(level)
        if h >= self.K:
            raise LevelFull(f"level {level} has no free run; merge it first")
        items = buffer.sorted_items()
        if len(items) > self.capacity(level):
            raise LsmError("buffer larger than a run")
        ref = self.run_ref(level, h)
        if fa == TX:
            self.arena.tx_begin()
            self._write_run(ref, items, snapshot=ref.length)
            self._publish({level: h + 1}, fa)
            self.arena.tx_commit()
        else:
            self._write_run(ref, items)
            self.arena.fence()
            self._publish({level: h + 1}, fa)
        buffer.clear()
        return self._delta(before)

    # -- merges ---------------------------------------------------------------

    def _merge_inputs(self, level: int, target: int) -> tuple[int, list]:
        if level + 1 != target or target >= self.levels:
            raise LsmError("merges go from a level to the next one")
        if self.head(level) != self.K:
            raise LsmError(f"level {level} is not full")
        th = self.head(target)
        if th >= self.K:
            raise LevelFull(f"level {target} has no free run")
        return th, [self.load_run(level, i) for i in range(self.K)]

    def merge(self, level: int = 0, fa: str = INDIVIDUAL, via_dram: bool = False,
              strategy: str = TWO_WAY) -> WriteStats:
        """Merge all runs of ``level`` into the next free run of ``level+1``."""
        _check_fa(fa)
        if strategy not in (TWO_WAY, K_WAY):
            raise ValueError(f"unknown merge strategy {strategy!r}")
        before = self.arena.counters()
        target = level + 1
        th, runs = self._merge_inputs(level, target)
        dest = self.run_ref(target, th)
        if via_dram:
            result = (_reduce_2way(runs) if strategy == TWO_WAY else kway_newest_wins(runs))
            extent = RUN_HEADER + PAIR * len(result)
        elif strategy == K_WAY:
            result = kway_newest_wins(runs)
            extent = RUN_HEADER + PAIR * self.K * self.capacity(level)
        else:
            acc = runs[0]
            for step, run in enumerate(runs[1:-1]):
                acc = merge_newest_wins(acc, run)
                scratch = self._scratch[step % 2]
                self._write_run(scratch, acc, flush=False)
                acc = _parse_pairs(
                    self.arena.load(scratch, RUN_HEADER, PAIR * len(acc)), len(acc))
            extent = RUN_HEADER + PAIR * (len(acc) + len(runs[-1]))
            result = merge_newest_wins(acc, runs[-1])
        updates = {target: th + 1, level: 0}
        if fa == TX:
            self.arena.tx_begin()
            self._write_run(dest, result, snapshot=extent)
            self._publish(updates, fa)
            self.arena.tx_commit()
        else:
            self._write_run(dest, result)
            self.arena.fence()
            self._publish(updates, fa)
        return self._delta(before)

    def merge_2way(self, level=0, fa=INDIVIDUAL, via_dram=False) -> WriteStats:
        return self.merge(level, fa, via_dram, TWO_WAY)

    def merge_kway(self, level=0, fa=INDIVIDUAL, via_dram=False) -> WriteStats:
        return self.merge(level, fa, via_dram, K_WAY)

    def _delta(self, before) -> WriteStats:
        return WriteStats.from_counters(
            [a - b for a, b in zip(self.arena.counters(), before)], self.arena.line_size)

    # -- whole-store helpers --------------------------------------------------

    def put_buffer(self, buffer: DramBuffer, fa: str = INDIVIDUAL, via_dram: bool = False,
                   strategy: str = TWO_WAY) -> None:
        """Move a buffer into level 0, merging full levels out of the way."""
        self._make_room(0, fa, via_dram, strategy)
        self.move_node(buffer, fa)

    def _make_room(self, level, fa, via_dram, strategy) -> None:
        if self.peek_head(level) < self.K:
            return
        if level + 1 >= self.levels:
            raise LevelFull("the last level is full")
        self._make_room(level + 1, fa, via_dram, strategy)
        self.merge(level, fa, via_dram, strategy)

    def levels_state(self) -> list[tuple[int, list]]:
        """Per level: (head, runs as item lists), read uninstrumented."""
        return [(self.peek_head(i), [self.peek_run(i, r) for r in range(self.peek_head(i))])
                for i in range(self.levels)]

    def logical(self) -> dict[int, bytes]:
        """The key->value map visible to readers (newest wins)."""
        out: dict[int, bytes] = {}
        for level in reversed(range(self.levels)):
            for r in range(self.peek_head(level)):
                out.update(self.peek_run(level, r))
        return out

    def dump(self) -> str:
        """Per run: level, head, run index, entry count, min and max key."""
        lines = []
        for level in range(self.levels):
            h = self.peek_head(level)
            if not h:
                lines.append(f"{level} {h} - 0 - -")
            for r in range(h):
                items = self.peek_run(level, r)
                lo = items[0][0] if items else "-"
                hi = items[-1][0] if items else "-"
                lines.append(f"{level} {h} {r} {len(items)} {lo} {hi}")
        return "\n".join(lines) + "\n"

    # -- recovery -------------------------------------------------------------

    @classmethod
    def recover(cls, arena: Arena) -> "LsmStore":
        """Rebuild the level view from the durable root area."""
        magic, k, c0, levels, base = _ROOT.unpack(arena.peek(arena.root, 0, _ROOT.size))
        if magic != LSM_MAGIC:
            raise LevelCorrupt("no LSM root record in arena")
        store = cls(arena, runs_per_level=k, levels=levels, run_capacity0=c0,
                    _create=False)
        store._runs = []
        pos = base
        for i in range(levels):
            size = RUN_HEADER + PAIR * store.capacity(i)
            runs = []
            for _ in range(k):
                pos = -(-pos // 64) * 64
                runs.append(PRef(pos, size))
                pos += size
            store._runs.append(runs)
        largest = RUN_HEADER + PAIR * k * store.capacity(max(levels - 2, 0))
        for _ in range(2):
            pos = -(-pos // 64) * 64
            store._scratch.append(PRef(pos, largest))
            pos += largest
        for i in range(levels):
            h = store.peek_head(i)
            if h > k:
                raise LevelCorrupt(f"level {i} head {h} exceeds {k} runs")
            for r in range(h):
                items = store.peek_run(i, r)
                if any(items[j][0] >= items[j + 1][0] for j in range(len(items) - 1)):
                    raise LevelCorrupt(f"run {i}/{r} is not sorted")
        return store


def recover_level(arena: Arena) -> LsmStore:
    return LsmStore.recover(arena)


def _reduce_2way(runs):
    acc = runs[0]
    for run in runs[1:]:
        acc = merge_newest_wins(acc, run)
    return acc


def _check_fa(fa: str) -> None:
    if fa not in FA_STRATEGIES:
        raise ValueError(f"unknown failure-atomicity strategy {fa!r}")
