"""Desk-scale analogs of the ten micro-benchmarks.

Every experiment expands its configuration into cells.  A cell builds a
pool of identical instances, then repeatedly picks one at random, runs the
measured operation between two counter resets and restores the instance
outside the measured window.  Setup and position lookups never count.
"""

from __future__ import annotations

import logging
import random
import statistics
from dataclasses import dataclass, field
from fractions import Fraction
from time import perf_counter_ns

from .. import lsm
from .. import nodes as nd
from .. import tree as tr
from ..pstore import Arena
from .results import COUNTER_COLUMNS, ExperimentConfig, ResultRow, arena_bytes

log = logging.getLogger("pmprims.bench")

NODE_FA = (nd.INDIVIDUAL, nd.TX)
E2_FANOUT = 4


@dataclass
class Cell:
    experiment: str
    layout: str
    node_size: int
    params: dict = field(default_factory=dict)

    def label(self) -> str:
        extra = " ".join(f"{k}={v}" for k, v in self.params.items())
        return f"{self.experiment} {self.layout} {self.node_size} {extra}".strip()


@dataclass
class Skip:
    cell: Cell
    reason: str


class _Meter:
    """Accumulates counter totals and latencies across iterations."""

    def __init__(self, *arenas):
        self.arenas = arenas
        self.totals = dict.fromkeys(COUNTER_COLUMNS, 0)
        self.latencies: list[int] = []

    def measure(self, op) -> None:
        for a in self.arenas:
            a.reset_stats()
        t0 = perf_counter_ns()
        op()
        elapsed = perf_counter_ns() - t0
        self.latencies.append(elapsed)
        # only the persistent arena's counters describe PMem traffic
        s = self.arenas[0].reset_stats()
        for a in self.arenas[1:]:
            a.reset_stats()
        t = self.totals
        t["modified_bytes"] += s.modified_bytes
        t["written_bytes"] += s.written_bytes
        t["flushed_lines"] += s.flushed_lines
        t["fences"] += s.fences
        t["lines_read"] += s.lines_read
        t["allocations"] += s.allocations
        t["log_bytes"] += s.log_bytes

    def row(self, cell: Cell, seed: int) -> ResultRow:
        n = len(self.latencies)
        p = {k: _param(v) for k, v in cell.params.items()}
        means = {c + "_mean": Fraction(self.totals[c], n) for c in COUNTER_COLUMNS}
        return ResultRow(cell.experiment, cell.layout, cell.node_size,
                         latency_ns_mean=statistics.fmean(self.latencies),
                         latency_ns_p50=float(statistics.median(self.latencies)),
                         iterations=n, seed=seed, **p, **means)


def _param(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    return str(v)


def _rank(position, n: int) -> int:
    if position == "first":
        return 0
    if position == "middle":
        return n // 2
    if position == "last":
        return n - 1
    return int(position)


def _key(rank: int) -> int:
    return 10 * (rank + 1)


def _value(i: int) -> bytes:
    return nd.pack_value(i, -i, i * 0.25)


def _entries(ranks) -> list[tuple[int, bytes]]:
    return [(_key(r), _value(r)) for r in ranks]


def _fill(cap: int, config: ExperimentConfig) -> int:
    return max(1, min(cap, round(cap * config.fill)))


def _instances(config: ExperimentConfig, instance_bytes: int) -> int:
    return max(1, min(config.iterations, config.pool_size // instance_bytes))


class _NodePool:
    """``count`` nodes (or node groups) stamped from template images."""

    def __init__(self, layout, node_size, count, group=1, cap=None):
        self.desc = nd.describe(layout, node_size, cap)
        self.arena = Arena(arena_bytes(count * group * node_size))
        self.nodes = [[nd.open_node(self.arena, nd.allocate_node(self.arena, self.desc),
                                    self.desc) for _ in range(group)]
                      for _ in range(count)]
        self.templates: list[bytes] = []
        self.arena.reset_stats()

    def stamp(self, *contents) -> None:
        first = self.nodes[0]
        for node, items in zip(first, contents):
            node.build(items, instrumented=False)
        self.templates = [node.image() for node in first]
        for group in self.nodes[1:]:
            self.restore(group)

    def restore(self, group) -> None:
        for node, img in zip(group, self.templates):
            self.arena.poke(node.ref, 0, img)


# -- cell expansion -------------------------------------------------------------

def _fa_list(config, default):
    return tuple(config.fa) or default


def expand(config: ExperimentConfig) -> tuple[list[Cell], list[Skip]]:
    e = config.id
    cells, skips = [], []

    def add(layout, size, **params):
        cells.append(Cell(e, layout, size, params))

    def skip(layout, size, reason, **params):
        skips.append(Skip(Cell(e, layout, size, params), reason))

    sizes, layouts = config.node_sizes, config.layouts
    if e == "E1":
        for layout in layouts:
            algos = config.algorithms or nd.SEARCH_ALGORITHMS[layout]
            for size in sizes:
                for pos in config.positions:
                    for algo in algos:
                        if algo not in nd.SEARCH_ALGORITHMS[layout]:
                            skip(layout, size, f"{algo} search does not apply to {layout}",
                                 position=pos, algorithm=algo)
                        else:
                            add(layout, size, position=pos, algorithm=algo)
    elif e == "E2":
        for layout in layouts:
            for size in sizes:
                for depth in config.depths:
                    add(layout, size, placement=config.placement, depth=depth)
    elif e == "E3":
        modes = config.algorithms or tuple(tr.ITERATE_MODES)
        for layout in layouts:
            for size in sizes:
                for mode in modes:
                    if layout not in tr.ITERATE_MODES.get(mode, ()):
                        skip(layout, size, f"{mode} iteration does not apply to {layout}",
                             strategy=mode)
                    else:
                        add(layout, size, strategy=mode)
    elif e in ("E4", "E8"):
        for layout in layouts:
            for size in sizes:
                for pos in config.positions:
                    for fa in _fa_list(config, (nd.INDIVIDUAL,)):
                        if fa not in NODE_FA:
                            skip(layout, size, f"node operations do not support fa={fa}",
                                 position=pos, fa=fa)
                        else:
                            add(layout, size, position=pos, fa=fa)
    elif e == "E5":
        strategies = config.algorithms or (nd.MOVE, nd.COPY)
        for layout in layouts:
            for size in sizes:
                for strat in strategies:
                    for fa in _fa_list(config, (nd.INDIVIDUAL,)):
                        if strat == nd.COPY and layout not in nd.BITMAP_LAYOUTS:
                            skip(layout, size, f"copy split needs a bitmap, {layout} has none",
                                 strategy=strat, fa=fa)
                        elif fa not in NODE_FA:
                            skip(layout, size, f"node operations do not support fa={fa}",
                                 strategy=strat, fa=fa)
                        else:
                            add(layout, size, strategy=strat, fa=fa)
    elif e == "E6":
        for org in config.lsm.organizations:
            for size in sizes:
                for fa in _fa_list(config, lsm.FA_STRATEGIES):
                    add(org, size, fa=fa)
    elif e == "E7":
        for size in sizes:
            for strat in config.lsm.merge:
                for fa in _fa_list(config, (lsm.TX, lsm.NONE)):
                    for dup in config.lsm.duplicates:
                        for via in config.lsm.via_dram:
                            add("sorted_run", size, strategy=strat, fa=fa,
                                duplicates=dup, via_dram=via)
    elif e in ("E9", "E10"):
        directions = ((config.algorithms or (nd.TO_LOWER, nd.TO_HIGHER)) if e == "E9"
                      else (nd.TO_LOWER,))
        for layout in layouts:
            for size in sizes:
                for d in directions:
                    for fa in _fa_list(config, (nd.INDIVIDUAL,)):
                        if fa not in NODE_FA:
                            skip(layout, size, f"node operations do not support fa={fa}",
                                 strategy=d, fa=fa)
                        else:
                            add(layout, size, strategy=d, fa=fa)
    return cells, skips


# -- experiment bodies --------------------------------------------------------

def _e1(cell, config, rng):
    cap = nd.capacity(cell.layout, cell.node_size)
    n = _fill(cap, config)
    r = _rank(cell.params["position"], n)
    if not 0 <= r < n:
        return None, f"rank {r} outside a node of {n} entries"
    pool = _NodePool(cell.layout, cell.node_size, _instances(config, cell.node_size))
    pool.stamp(_entries(range(n)))
    key, algo = _key(r), cell.params["algorithm"]
    meter = _Meter(pool.arena)
    for _ in range(config.iterations):
        node = pool.nodes[rng.randrange(len(pool.nodes))][0]
        meter.measure(lambda: node.search(key, algo))
    return meter, None


def _e2(cell, config, rng):
    depth = int(cell.params["depth"])
    if depth < 1:
        return None, "depth must be at least 1"
    leaf_cap = nd.capacity(cell.layout, cell.node_size)
    inner = cell.layout if cell.layout in nd.INNER_LAYOUTS else nd.SORTED
    leaves = E2_FANOUT ** (depth - 1)
    items = [(_key(i), _value(i)) for i in range(leaves * leaf_cap)]
    arena = Arena(arena_bytes((leaves + leaves // 2 + 2) * cell.node_size))
    inner_arena = None
    if cell.params["placement"] == tr.VOLATILE:
        inner_arena = Arena(arena_bytes((leaves // 2 + 2) * cell.node_size), persistent=False)
    t = tr.BPlusTree.build(arena, items, leaf_layout=cell.layout, inner_layout=inner,
                           node_size=cell.node_size, placement=cell.params["placement"],
                           inner_capacity=E2_FANOUT, inner_arena=inner_arena)
    if t.depth != depth:
        return None, f"bulk load produced depth {t.depth}"
    meter = _Meter(arena, t.inner_arena) if t.inner_arena is not arena else _Meter(arena)

    def walk():
        leaf, _ = t.traverse(rng=rng)
        leaf.size()

    for _ in range(config.iterations):
        meter.measure(walk)
    return meter, None


def _e3(cell, config, rng):
    cap = nd.capacity("search", cell.node_size)
    inner_cap = nd.capacity(nd.SORTED, cell.node_size)
    leaves = max(2, min(inner_cap, config.pool_size // cell.node_size))
    per = _fill(cap, config)
    items = [(_key(i), _value(i)) for i in range(leaves * per)]
    arena = Arena(arena_bytes((leaves + 2) * cell.node_size))
    t = tr.BPlusTree.build(arena, items, fill=per / cap, leaf_layout=cell.layout,
                           node_size=cell.node_size, leaf_capacity=cap)
    mode = cell.params["strategy"]
    meter = _Meter(arena)
    for _ in range(config.iterations):
        meter.measure(lambda: t.iterate(mode))
    return meter, None


def _e4(cell, config, rng):
    cap = nd.capacity(cell.layout, cell.node_size)
    n = _fill(cap, config)
    r = _rank(cell.params["position"], n)
    if not 0 <= r < n:
        return None, f"rank {r} outside a node of {n} entries"
    pool = _NodePool(cell.layout, cell.node_size, _instances(config, cell.node_size))
    pool.stamp(_entries(i for i in range(n) if i != r))
    key, value, fa = _key(r), _value(r), cell.params["fa"]
    meter = _Meter(pool.arena)
    for _ in range(config.iterations):
        group = pool.nodes[rng.randrange(len(pool.nodes))]
        node = group[0]
        pos = node.locate(key)
        meter.measure(lambda: node.insert(key, value, fa, pos=pos, measure=False))
        pool.restore(group)
    return meter, None


def _e5(cell, config, rng):
    cap = nd.capacity(cell.layout, cell.node_size)
    n = _fill(cap, config)
    if n < 2:
        return None, "a split needs at least two entries"
    pool = _NodePool(cell.layout, cell.node_size, _instances(config, cell.node_size))
    order = list(range(n))
    if cell.layout in (nd.UNSORTED, nd.BITMAP, nd.HASHING):
        # unordered layouts hold entries in arrival order; the median needs selecting
        random.Random(f"{config.seed}:{cell.layout}:{n}").shuffle(order)
    pool.stamp(_entries(order))
    strategy, fa = cell.params["strategy"], cell.params["fa"]
    arena = pool.arena
    meter = _Meter(arena)
    for _ in range(config.iterations):
        group = pool.nodes[rng.randrange(len(pool.nodes))]
        cursor = arena.cursor
        meter.measure(lambda: nd.split(group[0], strategy, fa))
        arena.release_to(cursor)
        pool.restore(group)
    return meter, None


def _e8(cell, config, rng):
    cap = nd.capacity(cell.layout, cell.node_size)
    n = _fill(cap, config)
    r = _rank(cell.params["position"], n)
    if not 0 <= r < n:
        return None, f"rank {r} outside a node of {n} entries"
    pool = _NodePool(cell.layout, cell.node_size, _instances(config, cell.node_size))
    pool.stamp(_entries(range(n)))
    key, fa = _key(r), cell.params["fa"]
    meter = _Meter(pool.arena)
    for _ in range(config.iterations):
        group = pool.nodes[rng.randrange(len(pool.nodes))]
        node = group[0]
        pos = node.locate(key)
        meter.measure(lambda: node.erase(key, fa, pos=pos, measure=False))
        pool.restore(group)
    return meter, None


def _e9(cell, config, rng):
    cap = nd.capacity(cell.layout, cell.node_size)
    half = cap // 2 - 1
    if half < 0 or cap // 4 < 1:
        return None, "node too small to balance"
    direction, fa = cell.params["strategy"], cell.params["fa"]
    pool = _NodePool(cell.layout, cell.node_size, _instances(config, 2 * cell.node_size), 2)
    if direction == nd.TO_LOWER:
        receiver, donor = range(half), range(half, half + cap)
    else:
        donor, receiver = range(cap), range(cap, cap + half)
    pool.stamp(_entries(donor), _entries(receiver))
    meter = _Meter(pool.arena)
    for _ in range(config.iterations):
        group = pool.nodes[rng.randrange(len(pool.nodes))]

        def op():
            with nd._fa_scope(pool.arena, fa):
                nd.balance(group[0], group[1], direction)

        meter.measure(op)
        pool.restore(group)
    return meter, None


def _e10(cell, config, rng):
    cap = nd.capacity(cell.layout, cell.node_size)
    ln, rn = cap // 2 - 1, cap // 2
    if ln < 0 or rn < 1:
        return None, "node too small to merge"
    fa = cell.params["fa"]
    pool = _NodePool(cell.layout, cell.node_size, _instances(config, 2 * cell.node_size), 2)
    pool.stamp(_entries(range(ln)), _entries(range(ln, ln + rn)))
    meter = _Meter(pool.arena)
    for _ in range(config.iterations):
        group = pool.nodes[rng.randrange(len(pool.nodes))]

        def op():
            with nd._fa_scope(pool.arena, fa):
                nd.merge_nodes(group[0], group[1])

        meter.measure(op)
        pool.restore(group)
    return meter, None


def _lsm_store(config, node_size, levels, extra_runs=0):
    K = config.lsm.K
    c0 = config.lsm.C or lsm.run_capacity(node_size)
    run_bytes = lsm.RUN_HEADER + lsm.PAIR * c0
    needed = run_bytes * K * (1 + K + 2 * K) + 4 * run_bytes
    arena = Arena(arena_bytes(needed), log_size=max(64 * 1024, 2 * K * K * run_bytes))
    store = lsm.LsmStore(arena, runs_per_level=K, node_size=node_size, levels=levels,
                         run_capacity0=c0)
    return arena, store


def _reset_heads(store) -> None:
    store.arena.poke(store.arena.root, lsm.HEADS_OFF, bytes(8 * store.levels))


def _e6(cell, config, rng):
    arena, store = _lsm_store(config, cell.node_size, 1)
    c0, fa = store.C0, cell.params["fa"]
    meter = _Meter(arena)
    next_key = 0
    for _ in range(config.iterations):
        if store.peek_head(0) >= store.K:
            _reset_heads(store)
        buf = lsm.DramBuffer(c0, cell.layout)
        keys = list(range(next_key, next_key + c0))
        next_key += c0
        rng.shuffle(keys)
        for k in keys:
            buf.insert(k, _value(k))
        meter.measure(lambda: store.move_node(buf, fa))
    return meter, None


def _e7(cell, config, rng):
    arena, store = _lsm_store(config, cell.node_size, 2)
    c0, K = store.C0, store.K
    fa, strategy = cell.params["fa"], cell.params["strategy"]
    dup = int(cell.params["duplicates"])
    via = cell.params["via_dram"] in (True, "true")
    if dup not in (0, 100):
        return None, "duplicate ratio must be 0 or 100"
    meter = _Meter(arena)
    for it in range(config.iterations):
        _reset_heads(store)
        for r in range(K):
            buf = lsm.DramBuffer(c0)
            for i in range(c0):
                k = i if dup == 100 else r * c0 + i
                buf.insert(k, nd.pack_value(it, r, float(i)))
            store.move_node(buf, lsm.NONE)
        meter.measure(lambda: store.merge(0, fa, via, strategy))
    return meter, None


_RUNNERS = {"E1": _e1, "E2": _e2, "E3": _e3, "E4": _e4, "E5": _e5, "E6": _e6,
            "E7": _e7, "E8": _e8, "E9": _e9, "E10": _e10}


def run_cells(config: ExperimentConfig) -> tuple[list[ResultRow], list[Skip]]:
    """Rows for every runnable cell plus the skipped cells with reasons."""
    cells, skips = expand(config)
    rows = []
    for cell in cells:
        rng = random.Random(f"{config.seed}:{cell.label()}")
        meter, reason = _RUNNERS[config.id](cell, config, rng)
        if meter is None:
            skips.append(Skip(cell, reason))
            continue
        rows.append(meter.row(cell, config.seed))
    for s in skips:
        log.warning("skipped %s: %s", s.cell.label(), s.reason)
    return rows, skips


def run(config: ExperimentConfig) -> list[ResultRow]:
    return run_cells(config)[0]
