"""Reference models used to check the primary modules.

Nothing here reuses the arena, node or LSM code paths it checks: the map is
a plain dict, byte diffs compare raw images, and the crash replayer keeps
its own per-line bookkeeping.  The layout-equivalence driver does call the
node primitives (that is what it exercises) but judges them only against
:class:`RefMap`.
"""

from __future__ import annotations

import random
import struct
from bisect import bisect_right
from dataclasses import dataclass, field
from pathlib import Path
from typing import NamedTuple

INSERT = "insert"
UPDATE = "update"
SEARCH = "search"
ERASE = "erase"
SPLIT = "split"
BALANCE = "balance"
MERGE = "merge"
OPCODES = (INSERT, UPDATE, SEARCH, ERASE, SPLIT, BALANCE, MERGE)
STRUCTURAL = (SPLIT, BALANCE, MERGE)

_VALUE = struct.Struct("<iid")
_WORD = 8


# -- reference map ------------------------------------------------------------

class Op(NamedTuple):
    kind: str
    key: int = 0
    value: bytes = b""


class RefMap:
    """An ordered key -> value map with no capacity limits."""

    def __init__(self, items=()):
        self._d: dict[int, bytes] = dict(items)

    def __len__(self):
        return len(self._d)

    def __contains__(self, key):
        return key in self._d

    def get(self, key, default=None):
        return self._d.get(key, default)

    def items(self) -> list[tuple[int, bytes]]:
        return sorted(self._d.items())

    def keys(self) -> list[int]:
        return sorted(self._d)

    def apply(self, op: Op) -> "RefMap":
        if op.kind in (INSERT, UPDATE):
            self._d[op.key] = op.value
        elif op.kind == ERASE:
            if op.key not in self._d:
                raise KeyError(op.key)
            del self._d[op.key]
        elif op.kind not in (SEARCH,) + STRUCTURAL:
            raise ValueError(f"unknown operation {op.kind!r}")
        return self


def apply(refmap: RefMap, op: Op) -> RefMap:
    return refmap.apply(op)


# -- byte diffs ---------------------------------------------------------------

@dataclass(frozen=True)
class ShadowDiff:
    before: bytes
    after: bytes

    def __post_init__(self):
        if len(self.before) != len(self.after):
            raise ValueError("shadow images differ in length")

    def ranges(self) -> list[tuple[int, int]]:
        """Maximal [start, end) runs of differing bytes."""
        out = []
        start = None
        for i, (x, y) in enumerate(zip(self.before, self.after)):
            if x != y:
                if start is None:
                    start = i
            elif start is not None:
                out.append((start, i))
                start = None
        if start is not None:
            out.append((start, len(self.before)))
        return out


def diff_bytes(shadow: ShadowDiff) -> int:
    return sum(x != y for x, y in zip(shadow.before, shadow.after))


# -- crash points -------------------------------------------------------------

def enumerate_crash_points(trace, limit: int = 10_000, seed: int = 0):
    """One deterministic crash plan per event boundary (``len(trace)+1``).

    Longer traces are sampled: ``limit`` seeded points plus both ends.
    """
    from .pstore import CrashPlan

    n = len(trace)
    if n <= limit:
        points = range(n + 1)
    else:
        rng = random.Random(seed)
        points = sorted({0, n} | set(rng.sample(range(1, n), limit - 2)))
    return [CrashPlan(crash_point=p) for p in points]


class CrashReplayer:
    """Independent model of line persistence for a recorded event trace.

    ``start`` is the volatile image, ``durable`` the durable image when the
    trace began, ``unclean`` the lines that were not clean then and
    ``pending`` their flushed-but-unfenced snapshots.
    """

    def __init__(self, start: bytes, durable: bytes, events, line_size: int = 64,
                 unclean=(), pending=None):
        self.start = bytes(start)
        self.durable = bytes(durable)
        self.events = list(events)
        self.ls = line_size
        self.unclean = set(unclean)
        self.pending = dict(pending or {})

    @classmethod
    def from_arena(cls, arena) -> "CrashReplayer":
        volatile, durable = arena.trace_start_image
        unclean, pending = arena.trace_start_lines
        return cls(volatile, durable, arena.events, arena.line_size, unclean, pending)

    def state_at(self, crash_point: int):
        """(volatile image, durable image, lines not clean) after ``crash_point`` events."""
        if not 0 <= crash_point <= len(self.events):
            raise ValueError("crash point outside the trace")
        ls = self.ls
        vol = bytearray(self.start)
        dur = bytearray(self.durable)
        dirty = {line for line in self.unclean if line not in self.pending}
        flushed = {line for line in self.unclean if line in self.pending}
        pending = dict(self.pending)
        for kind, off, n, payload in self.events[:crash_point]:
            if kind == "store":
                vol[off:off + n] = payload
                for line in range(off // ls, (off + n - 1) // ls + 1):
                    dirty.add(line)
                    flushed.discard(line)
            elif kind == "flush":
                for line in range(off // ls, (off + n - 1) // ls + 1):
                    if line in dirty:
                        pending[line] = bytes(vol[line * ls:(line + 1) * ls])
                        dirty.discard(line)
                        flushed.add(line)
            elif kind == "fence":
                for line, snap in pending.items():
                    dur[line * ls:(line + 1) * ls] = snap
                    flushed.discard(line)
                pending.clear()
            else:
                raise ValueError(f"unknown event kind {kind!r}")
        return bytes(vol), bytes(dur), dirty | flushed

    def image(self, crash_point: int) -> bytes:
        return self.state_at(crash_point)[1]


def torn_words(image: bytes, old: bytes, new: bytes) -> list[int]:
    """Offsets of 8-byte words matching neither the old nor the new image."""
    bad = []
    for w in range(0, len(image), _WORD):
        word = image[w:w + _WORD]
        if word != old[w:w + _WORD] and word != new[w:w + _WORD]:
            bad.append(w)
    return bad


# -- operation sequences ------------------------------------------------------

def make_value(step: int, key: int) -> bytes:
    return _VALUE.pack(step & 0x7FFFFFFF, key & 0x7FFFFFFF, step * 0.5)


def generate_ops(n: int, seed: int, key_space: int,
                 weights=(0.5, 0.3, 0.2)):
    """Seeded insert/search/erase sequence over keys ``[0, key_space)``."""
    rng = random.Random(seed)
    wi, ws, _ = weights
    total = sum(weights)
    ti, ts = wi / total, (wi + ws) / total
    for step in range(n):
        x = rng.random()
        key = rng.randrange(key_space)
        if x < ti:
            yield Op(INSERT, key, make_value(step, key))
        elif x < ts:
            yield Op(SEARCH, key)
        else:
            yield Op(ERASE, key)


def write_replay(path, ops) -> None:
    """One operation per line: opcode, key, value as hex (or '-')."""
    with open(path, "w", encoding="utf-8") as fh:
        for op in ops:
            fh.write(f"{op.kind} {op.key} {op.value.hex() if op.value else '-'}\n")


def read_replay(path) -> list[Op]:
    ops = []
    for n, line in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), 1):
        if not line.strip():
            continue
        parts = line.split()
        if len(parts) != 3 or parts[0] not in OPCODES:
            raise ValueError(f"replay line {n} is malformed: {line!r}")
        ops.append(Op(parts[0], int(parts[1]),
                      b"" if parts[2] == "-" else bytes.fromhex(parts[2])))
    return ops


# -- layout equivalence -------------------------------------------------------

class Mismatch(AssertionError):
    pass


@dataclass
class EquivalenceReport:
    layout: str
    node_size: int
    seed: int
    steps: int = 0
    counts: dict = field(default_factory=dict)
    full_checks: int = 0


class LeafSet:
    """Key-range partitioned nodes driven only through node primitives.

    A list of exclusive upper bounds routes each key to one node; overflow
    splits, underflow balances with a neighbour or merges into the lower
    node.  Each node is checked against the reference after every step.
    """

    def __init__(self, arena, layout: str, node_size: int, rng: random.Random):
        from . import nodes as nd

        self.nd = nd
        self.arena = arena
        self.desc = nd.describe(layout, node_size)
        self.rng = rng
        self.free: list = []
        first = nd.new_node(arena, layout, node_size)
        self.leaves = [first]
        self.bounds = [nd.MAX_KEY]
        self.size = 0
        self.counts = {k: 0 for k in OPCODES}

    def _alloc(self, desc):
        if self.free:
            return self.free.pop()
        return self.nd.allocate_node(self.arena, desc)

    def route(self, key: int) -> int:
        return bisect_right(self.bounds, key)

    def check_node(self, i: int, ref: RefMap) -> None:
        lo = self.bounds[i - 1] if i else 0
        hi = self.bounds[i]
        node = self.leaves[i]
        for k, v in node.items():
            if not lo <= k < hi:
                raise Mismatch(f"key {k} stored outside node range [{lo}, {hi})")
            if ref.get(k) != v:
                raise Mismatch(f"key {k}: node holds {v!r}, reference {ref.get(k)!r}")

    def check_all(self, ref: RefMap) -> None:
        got = []
        for i, node in enumerate(self.leaves):
            self.check_node(i, ref)
            got.extend(node.items())
        if got != ref.items():
            raise Mismatch("node contents differ from the reference map")

    def step(self, op: Op, ref: RefMap) -> None:
        nd = self.nd
        i = self.route(op.key)
        node = self.leaves[i]
        r = node.search(op.key)
        expected = ref.get(op.key)
        if r.found != (expected is not None):
            raise Mismatch(f"{op.kind} {op.key}: search found={r.found}, reference "
                           f"{'has' if expected is not None else 'lacks'} the key")
        if r.found and node.peek_value(r.physical_pos) != expected:
            raise Mismatch(f"{op.kind} {op.key}: stale value")
        if op.kind == SEARCH:
            self.counts[SEARCH] += 1
            return
        if op.kind == INSERT:
            kind = UPDATE if r.found else INSERT
            before = node.peek_size()
            if r.found or before < node.capacity:
                node.insert(op.key, op.value, pos=r, measure=False)
            else:
                strategy = nd.COPY if self.desc.has_bitmap and self.rng.random() < 0.5 \
                    else nd.MOVE
                left, right, sep = nd.split(node, strategy, allocator=self._alloc)
                self.counts[SPLIT] += 1
                self.leaves.insert(i + 1, right)
                self.bounds.insert(i, sep + 1)
                j = i if op.key <= sep else i + 1
                target = self.leaves[j]
                target.insert(op.key, op.value, pos=target.search(op.key), measure=False)
                ref.apply(Op(kind, op.key, op.value))
                self.size += kind == INSERT
                self.check_node(i, ref)
                self.check_node(i + 1, ref)
                self.counts[kind] += 1
                return
            ref.apply(Op(kind, op.key, op.value))
            self.size += kind == INSERT
            if node.peek_size() != before + (kind == INSERT):
                raise Mismatch(f"insert {op.key}: node size {before} -> {node.peek_size()}")
            self.counts[kind] += 1
            return
        if op.kind == ERASE:
            if not r.found:
                return
            before = node.peek_size()
            node.erase(op.key, pos=r, measure=False)
            ref.apply(op)
            self.size -= 1
            self.counts[ERASE] += 1
            if node.peek_size() != before - 1:
                raise Mismatch(f"erase {op.key}: node size {before} -> {node.peek_size()}")
            if node.peek_size() < self.desc.min_fill and len(self.leaves) > 1:
                self._underflow(i, ref)
            return
        raise ValueError(f"operation {op.kind!r} is not generated by the driver")

    def _underflow(self, i: int, ref: RefMap) -> None:
        nd = self.nd
        fill = self.desc.min_fill
        node = self.leaves[i]
        size = node.peek_size()
        if i + 1 < len(self.leaves) and self.leaves[i + 1].peek_size() > fill:
            donor = self.leaves[i + 1]
            nd.balance(donor, node, nd.TO_LOWER, (donor.peek_size() - size) // 2)
            self.bounds[i] = node.max_key() + 1
            self.counts[BALANCE] += 1
            self.check_node(i, ref)
            self.check_node(i + 1, ref)
            return
        if i > 0 and self.leaves[i - 1].peek_size() > fill:
            donor = self.leaves[i - 1]
            nd.balance(donor, node, nd.TO_HIGHER, (donor.peek_size() - size) // 2)
            self.bounds[i - 1] = donor.max_key() + 1
            self.counts[BALANCE] += 1
            self.check_node(i - 1, ref)
            self.check_node(i, ref)
            return
        lo = i if i + 1 < len(self.leaves) else i - 1
        lower, upper = self.leaves[lo], self.leaves[lo + 1]
        nd.merge_nodes(lower, upper)
        nd.unlink(upper)
        self.free.append(upper.ref)
        del self.leaves[lo + 1]
        del self.bounds[lo]
        self.counts[MERGE] += 1
        self.check_node(lo, ref)


def run_equivalence(layout: str, node_size: int, seed: int, steps: int = 100_000,
                    key_space: int | None = None, full_every: int = 5_000,
                    weights=(0.5, 0.3, 0.2), arena=None) -> EquivalenceReport:
    """Drive one layout with a seeded op sequence, comparing against RefMap.

    Raises :class:`Mismatch` naming the first disagreeing step.
    """
    from . import nodes as nd
    from .pstore import Arena

    cap = nd.capacity(layout, node_size)
    if key_space is None:
        key_space = 16 * cap
    if arena is None:
        arena = Arena(max(1 << 20, node_size * (key_space // max(1, cap // 2) + 64)))
    ref = RefMap()
    leaves = LeafSet(arena, layout, node_size, random.Random(seed ^ 0x5EED))
    report = EquivalenceReport(layout, node_size, seed)
    for n, op in enumerate(generate_ops(steps, seed, key_space, weights), 1):
        try:
            leaves.step(op, ref)
            if leaves.size != len(ref):
                raise Mismatch(f"size {leaves.size} != reference {len(ref)}")
            if n % full_every == 0 or n == steps:
                leaves.check_all(ref)
                report.full_checks += 1
        except Mismatch as exc:
            raise Mismatch(f"{layout}/{node_size} seed {seed} step {n} ({op.kind} "
                           f"{op.key}): {exc}") from None
    report.steps = steps
    report.counts = dict(leaves.counts)
    return report


# -- LSM crash dichotomy ------------------------------------------------------

def lsm_state(store) -> list[tuple[int, list]]:
    """Per level (head, valid runs) read straight from the raw image."""
    return store.levels_state()


def logical_map(state) -> dict:
    out = {}
    for head, runs in reversed(state):
        for run in runs[:head]:
            out.update(run)
    return out


def dichotomy_violations(old, new, recovered) -> list[str]:
    """Check a recovered LSM state against the states before and after an
    operation.  Every level must show the old or the new head with intact
    runs under it, and the visible map must be the old or the new one."""
    problems = []
    for level, (got, o, w) in enumerate(zip(recovered, old, new)):
        head, runs = got
        if (head, runs) == o or (head, runs) == w:
            continue
        if head not in (o[0], w[0]):
            problems.append(f"level {level}: head {head} not in {{{o[0]}, {w[0]}}}")
            continue
        expect = o if head == o[0] else w
        for r, (a, b) in enumerate(zip(runs, expect[1])):
            if a != b:
                problems.append(f"level {level} run {r}: contents not durable")
    lm = logical_map(recovered)
    if lm != logical_map(old) and lm != logical_map(new):
        problems.append("visible map is neither the old nor the new one")
    return problems
